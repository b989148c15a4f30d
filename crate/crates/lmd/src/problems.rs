//! Convex problem classes: KL and least squares on the simplex, 2-D least
//! squares, SVM hinge training, multi-class linear classification, and total
//! variation denoising/inpainting on 16x16 grayscale images.
//!
//! Each problem offers a plain objective/subgradient pair for solvers and a
//! tape-building pair for unrolled training. Nonsmooth pieces (hinge, the TV
//! sign) enter the tape through constant masks computed from the current
//! primal, which is exactly the a.e. Jacobian under the kink conventions.

use crate::linalg;
use crate::potentials::Domain;
use crate::rng::{self, seeded};
use crate::tape::{NodeId, TapeError, TapeGraph};
use crate::tensor::{Norm, Tensor, TensorError};
use rand::prelude::SliceRandom;
use rand::Rng;
use std::fmt;

#[derive(Debug)]
pub enum ProblemError {
    DomainViolation { index: usize, value: f64 },
    Shape(TensorError),
    Tape(TapeError),
}

impl fmt::Display for ProblemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DomainViolation { index, value } => {
                write!(f, "coordinate {index} = {value} outside the problem domain")
            }
            Self::Shape(e) => write!(f, "{e}"),
            Self::Tape(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ProblemError {}

impl From<TensorError> for ProblemError {
    fn from(e: TensorError) -> Self {
        Self::Shape(e)
    }
}
impl From<TapeError> for ProblemError {
    fn from(e: TapeError) -> Self {
        Self::Tape(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProblemKind {
    KlSimplex,
    LsqSimplex,
    Lsq2d,
    SvmHinge,
    LinearClassifier,
    TvDenoise,
    TvInpaint,
}

impl ProblemKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::KlSimplex => "kl-simplex",
            Self::LsqSimplex => "lsq-simplex",
            Self::Lsq2d => "lsq-2d",
            Self::SvmHinge => "svm-hinge",
            Self::LinearClassifier => "linear-classifier",
            Self::TvDenoise => "tv-denoise",
            Self::TvInpaint => "tv-inpaint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "kl-simplex" => Some(Self::KlSimplex),
            "lsq-simplex" => Some(Self::LsqSimplex),
            "lsq-2d" | "lsq2d" => Some(Self::Lsq2d),
            "svm-hinge" | "svm" => Some(Self::SvmHinge),
            "linear-classifier" | "classifier" => Some(Self::LinearClassifier),
            "tv-denoise" | "denoise" => Some(Self::TvDenoise),
            "tv-inpaint" | "inpaint" => Some(Self::TvInpaint),
            _ => None,
        }
    }
}

/// Stacked forward-difference operator on a `side x side` image with Neumann
/// boundary: horizontal differences first, then vertical.
pub fn tv_difference_matrix(side: usize) -> Tensor {
    let n = side * side;
    let rows = 2 * side * (side - 1);
    let mut d = Tensor::zeros(&[rows, n]);
    let mut r = 0;
    // horizontal: x[i, j+1] - x[i, j]
    for i in 0..side {
        for j in 0..side - 1 {
            d.set(r, i * side + j + 1, 1.0);
            d.set(r, i * side + j, -1.0);
            r += 1;
        }
    }
    // vertical: x[i+1, j] - x[i, j]
    for i in 0..side - 1 {
        for j in 0..side {
            d.set(r, (i + 1) * side + j, 1.0);
            d.set(r, i * side + j, -1.0);
            r += 1;
        }
    }
    d
}

fn sign_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One sampled convex objective.
#[derive(Debug, Clone)]
pub enum Problem {
    /// KL(x || y) on the simplex interior.
    KlSimplex { y: Tensor },
    /// ||x - y||^2 on the simplex.
    LsqSimplex { y: Tensor },
    /// ||Wx - b||^2 on R^2.
    Lsq2d { w: Tensor, b: Tensor },
    /// Hinge SVM over (w, b): 1/2 w'w + C sum max(0, 1 - y_i(w'phi_i + b)).
    /// `design` is [phi | 1] so the bias rides in the last coordinate.
    SvmHinge { design: Tensor, labels: Tensor, c: f64 },
    /// Mean cross-entropy of a linear layer W in R^{classes x d}, flattened.
    LinearClassifier { features: Tensor, labels: Vec<usize>, classes: usize },
    /// ||x - y||^2 + lambda ||D x||_1 on a flattened image.
    TvDenoise { y: Tensor, lambda: f64, side: usize },
    /// ||Z o (x - y)||^2 + lambda ||D x||_1 with a fixed binary mask Z.
    TvInpaint { y: Tensor, mask: Tensor, lambda: f64, side: usize },
}

impl Problem {
    pub fn kind(&self) -> ProblemKind {
        match self {
            Self::KlSimplex { .. } => ProblemKind::KlSimplex,
            Self::LsqSimplex { .. } => ProblemKind::LsqSimplex,
            Self::Lsq2d { .. } => ProblemKind::Lsq2d,
            Self::SvmHinge { .. } => ProblemKind::SvmHinge,
            Self::LinearClassifier { .. } => ProblemKind::LinearClassifier,
            Self::TvDenoise { .. } => ProblemKind::TvDenoise,
            Self::TvInpaint { .. } => ProblemKind::TvInpaint,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::KlSimplex { y } | Self::LsqSimplex { y } => y.len(),
            Self::Lsq2d { .. } => 2,
            Self::SvmHinge { design, .. } => design.cols(),
            Self::LinearClassifier { features, classes, .. } => features.cols() * classes,
            Self::TvDenoise { y, .. } | Self::TvInpaint { y, .. } => y.len(),
        }
    }

    pub fn domain(&self) -> Domain {
        match self {
            Self::KlSimplex { .. } | Self::LsqSimplex { .. } => Domain::SimplexInterior,
            _ => Domain::Reals,
        }
    }

    fn check_domain(&self, x: &Tensor) -> Result<(), ProblemError> {
        if let Self::KlSimplex { .. } = self {
            for (i, &v) in x.data().iter().enumerate() {
                if v <= 0.0 {
                    return Err(ProblemError::DomainViolation { index: i, value: v });
                }
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &Tensor) -> Result<f64, ProblemError> {
        self.check_domain(x)?;
        match self {
            Self::KlSimplex { y } => Ok(x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * (a / b).ln() })
                .sum()),
            Self::LsqSimplex { y } => {
                let d = x.sub(y)?;
                Ok(d.dot(&d)?)
            }
            Self::Lsq2d { w, b } => {
                let r = w.matvec(x)?.sub(b)?;
                Ok(r.dot(&r)?)
            }
            Self::SvmHinge { design, labels, c } => {
                let scores = design.matvec(x)?;
                let hinge: f64 = scores
                    .data()
                    .iter()
                    .zip(labels.data())
                    .map(|(&s, &y)| (1.0 - y * s).max(0.0))
                    .sum();
                let d = design.cols() - 1;
                let w_norm: f64 = x.data()[..d].iter().map(|v| v * v).sum();
                Ok(0.5 * w_norm + c * hinge)
            }
            Self::LinearClassifier { features, labels, classes } => {
                let n = features.rows();
                let d = features.cols();
                let mut total = 0.0;
                for i in 0..n {
                    let mut logits = vec![0.0; *classes];
                    for (k, logit) in logits.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for j in 0..d {
                            s += x.data()[k * d + j] * features.at(i, j);
                        }
                        *logit = s;
                    }
                    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                    total += lse - logits[labels[i]];
                }
                Ok(total / n as f64)
            }
            Self::TvDenoise { y, lambda, side } => {
                let r = x.sub(y)?;
                let d = tv_difference_matrix(*side).matvec(x)?;
                Ok(r.dot(&r)? + lambda * d.norm_l1())
            }
            Self::TvInpaint { y, mask, lambda, side } => {
                let r = x.sub(y)?.mul(mask)?;
                let d = tv_difference_matrix(*side).matvec(x)?;
                Ok(r.dot(&r)? + lambda * d.norm_l1())
            }
        }
    }

    /// A valid subgradient at `x`; equals the gradient wherever f is smooth.
    pub fn subgradient(&self, x: &Tensor) -> Result<Tensor, ProblemError> {
        self.check_domain(x)?;
        match self {
            Self::KlSimplex { y } => Ok(Tensor::vector(
                x.data()
                    .iter()
                    .zip(y.data())
                    .map(|(&a, &b)| 1.0 + (a / b).ln())
                    .collect(),
            )),
            Self::LsqSimplex { y } => Ok(x.sub(y)?.scale(2.0)),
            Self::Lsq2d { w, b } => {
                let r = w.matvec(x)?.sub(b)?;
                Ok(w.matvec_t(&r)?.scale(2.0))
            }
            Self::SvmHinge { design, labels, c } => {
                let scores = design.matvec(x)?;
                let d = design.cols() - 1;
                // active set uses the right-branch convention at the kink
                let coef = Tensor::vector(
                    scores
                        .data()
                        .iter()
                        .zip(labels.data())
                        .map(|(&s, &y)| if 1.0 - y * s >= 0.0 { y } else { 0.0 })
                        .collect(),
                );
                let mut g = design.matvec_t(&coef)?.scale(-c);
                for j in 0..d {
                    g.data_mut()[j] += x.data()[j];
                }
                Ok(g)
            }
            Self::LinearClassifier { features, labels, classes } => {
                let n = features.rows();
                let d = features.cols();
                let mut g = vec![0.0; classes * d];
                for i in 0..n {
                    let mut logits = vec![0.0; *classes];
                    for (k, logit) in logits.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for j in 0..d {
                            s += x.data()[k * d + j] * features.at(i, j);
                        }
                        *logit = s;
                    }
                    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let z: f64 = logits.iter().map(|&v| (v - m).exp()).sum();
                    for k in 0..*classes {
                        let p = (logits[k] - m).exp() / z;
                        let delta = p - if labels[i] == k { 1.0 } else { 0.0 };
                        for j in 0..d {
                            g[k * d + j] += delta * features.at(i, j) / n as f64;
                        }
                    }
                }
                Ok(Tensor::vector(g))
            }
            Self::TvDenoise { y, lambda, side } => {
                let diff = tv_difference_matrix(*side);
                let s = diff.matvec(x)?.map(sign_zero);
                let mut g = x.sub(y)?.scale(2.0);
                g.axpy(*lambda, &diff.matvec_t(&s)?);
                Ok(g)
            }
            Self::TvInpaint { y, mask, lambda, side } => {
                let diff = tv_difference_matrix(*side);
                let s = diff.matvec(x)?.map(sign_zero);
                let mut g = x.sub(y)?.mul(mask)?.scale(2.0);
                g.axpy(*lambda, &diff.matvec_t(&s)?);
                Ok(g)
            }
        }
    }

    /// Closed-form argmin where one exists.
    pub fn true_minimizer(&self) -> Option<Tensor> {
        match self {
            Self::KlSimplex { y } | Self::LsqSimplex { y } => Some(y.clone()),
            Self::Lsq2d { w, b } => linalg::solve_lu(w, b).ok(),
            _ => None,
        }
    }

    /// Strong-convexity constant of the objective with respect to `norm`,
    /// zero when no certificate exists (hinge, classifier, inpainting).
    pub fn strong_convexity(&self, norm: Norm) -> f64 {
        match self {
            // Bregman of KL dominates both 1/2||.||_1^2 (Pinsker) and
            // 1/2||.||_2^2 on the simplex
            Self::KlSimplex { .. } => match norm {
                Norm::L1 | Norm::L2 => 1.0,
                Norm::LInf => 0.0,
            },
            Self::LsqSimplex { .. } => match norm {
                Norm::L2 => 2.0,
                _ => 0.0,
            },
            Self::Lsq2d { w, .. } => match norm {
                Norm::L2 => {
                    let h = w.transpose().unwrap().matmul(w).unwrap().scale(2.0);
                    linalg::sym_min_eigenvalue(&h).max(0.0)
                }
                _ => 0.0,
            },
            Self::TvDenoise { .. } => match norm {
                Norm::L2 => 2.0,
                _ => 0.0,
            },
            _ => 0.0,
        }
    }

    /// Append the objective to a tape rooted at `x`; returns the scalar node.
    pub fn objective_graph(&self, tape: &mut TapeGraph, x: NodeId) -> Result<NodeId, ProblemError> {
        match self {
            Self::KlSimplex { y } => {
                let lx = tape.log(x)?;
                let t1 = tape.dot(x, lx)?;
                let ly = tape.const_leaf(y.map(f64::ln));
                let t2 = tape.dot(x, ly)?;
                Ok(tape.sub(t1, t2)?)
            }
            Self::LsqSimplex { y } => {
                let yc = tape.const_leaf(y.clone());
                let r = tape.sub(x, yc)?;
                Ok(tape.dot(r, r)?)
            }
            Self::Lsq2d { w, b } => {
                let wc = tape.const_leaf(w.clone());
                let bc = tape.const_leaf(b.clone());
                let wx = tape.matvec(wc, x)?;
                let r = tape.sub(wx, bc)?;
                Ok(tape.dot(r, r)?)
            }
            Self::SvmHinge { design, labels, c } => {
                let dc = tape.const_leaf_keyed(0x5de51601, || design.clone());
                let scores = tape.matvec(dc, x)?;
                let yc = tape.const_leaf(labels.clone());
                let ys = tape.mul(yc, scores)?;
                let ones = tape.const_leaf(Tensor::full(&[labels.len()], 1.0));
                let margins = tape.sub(ones, ys)?;
                let hinge = tape.max_zero(margins)?;
                let hsum = tape.sum_reduce(hinge)?;
                let cs = tape.scalar_leaf(*c);
                let penalty = tape.scalar_mul(cs, hsum)?;
                // 1/2 ||w||^2 masks out the bias coordinate
                let d = design.cols() - 1;
                let mut mask = Tensor::full(&[d + 1], 1.0);
                mask.data_mut()[d] = 0.0;
                let maskc = tape.const_leaf(mask);
                let wpart = tape.mul(x, maskc)?;
                let wsq = tape.dot(wpart, wpart)?;
                let half = tape.scalar_leaf(0.5);
                let reg = tape.scalar_mul(half, wsq)?;
                Ok(tape.add(reg, penalty)?)
            }
            Self::LinearClassifier { features, labels, classes } => {
                let n = features.rows();
                let d = features.cols();
                let wm = tape.reshape(x, vec![*classes, d])?;
                let fc = tape.const_leaf_keyed(0xfea70102, || features.clone());
                let wt = tape.transpose(wm)?;
                let logits = tape.matmul(fc, wt)?; // [n, classes]
                let lse = tape.log_sum_exp(logits)?; // [n]
                let lse_sum = tape.sum_reduce(lse)?;
                let mut onehot = Tensor::zeros(&[n, *classes]);
                for (i, &lab) in labels.iter().enumerate() {
                    onehot.set(i, lab, 1.0);
                }
                let oh = tape.const_leaf(onehot);
                let picked = tape.mul(logits, oh)?;
                let picked_sum = tape.sum_reduce(picked)?;
                let diff = tape.sub(lse_sum, picked_sum)?;
                let inv_n = tape.scalar_leaf(1.0 / n as f64);
                Ok(tape.scalar_mul(inv_n, diff)?)
            }
            Self::TvDenoise { y, lambda, side } => {
                let yc = tape.const_leaf(y.clone());
                let r = tape.sub(x, yc)?;
                let fid = tape.dot(r, r)?;
                let tv = tv_graph(tape, x, *side, *lambda)?;
                Ok(tape.add(fid, tv)?)
            }
            Self::TvInpaint { y, mask, lambda, side } => {
                let yc = tape.const_leaf(y.clone());
                let mc = tape.const_leaf(mask.clone());
                let r0 = tape.sub(x, yc)?;
                let r = tape.mul(r0, mc)?;
                let fid = tape.dot(r, r)?;
                let tv = tv_graph(tape, x, *side, *lambda)?;
                Ok(tape.add(fid, tv)?)
            }
        }
    }

    /// Append a subgradient evaluation to a tape rooted at `x`; returns the
    /// vector node. Piecewise-constant factors (hinge activity, TV signs)
    /// enter as constants read from the primal at `x`, matching their a.e.
    /// derivative of zero.
    pub fn subgradient_graph(
        &self,
        tape: &mut TapeGraph,
        x: NodeId,
    ) -> Result<NodeId, ProblemError> {
        match self {
            Self::KlSimplex { y } => {
                let lx = tape.log(x)?;
                let shift = tape.const_leaf(y.map(|v| v.ln() - 1.0));
                Ok(tape.sub(lx, shift)?)
            }
            Self::LsqSimplex { y } => {
                let yc = tape.const_leaf(y.clone());
                let r = tape.sub(x, yc)?;
                let two = tape.scalar_leaf(2.0);
                Ok(tape.scalar_mul(two, r)?)
            }
            Self::Lsq2d { w, b } => {
                let wc = tape.leaf(w.clone());
                let wtc = tape.const_leaf(w.transpose()?);
                let bc = tape.leaf(b.clone());
                let wx = tape.matvec(wc, x)?;
                let r = tape.sub(wx, bc)?;
                let wtr = tape.matvec(wtc, r)?;
                let two = tape.scalar_leaf(2.0);
                Ok(tape.scalar_mul(two, wtr)?)
            }
            Self::SvmHinge { design, labels, c } => {
                let dc = tape.const_leaf_keyed(0x5de51601, || design.clone());
                let scores = tape.matvec(dc, x)?;
                // active coefficients from the primal; constant on the tape
                let coef = Tensor::vector(
                    tape.primal(scores)
                        .data()
                        .iter()
                        .zip(labels.data())
                        .map(|(&s, &y)| if 1.0 - y * s >= 0.0 { y } else { 0.0 })
                        .collect(),
                );
                let coefc = tape.const_leaf(coef);
                let dtc = tape.const_leaf_keyed(0x5de51602, || design.transpose().expect("design is a matrix"));
                let pull = tape.matvec(dtc, coefc)?;
                let negc = tape.scalar_leaf(-c);
                let hinge_part = tape.scalar_mul(negc, pull)?;
                let d = design.cols() - 1;
                let mut mask = Tensor::full(&[d + 1], 1.0);
                mask.data_mut()[d] = 0.0;
                let maskc = tape.const_leaf(mask);
                let wpart = tape.mul(x, maskc)?;
                Ok(tape.add(wpart, hinge_part)?)
            }
            Self::LinearClassifier { features, labels, classes } => {
                let n = features.rows();
                let d = features.cols();
                let wm = tape.reshape(x, vec![*classes, d])?;
                let fc = tape.const_leaf_keyed(0xfea70102, || features.clone());
                let wt = tape.transpose(wm)?;
                let logits = tape.matmul(fc, wt)?; // [n, classes]
                let lse = tape.log_sum_exp(logits)?; // [n]
                let lse_col = tape.reshape(lse, vec![n, 1])?;
                let ones_row = tape.const_leaf(Tensor::full(&[1, *classes], 1.0));
                let spread = tape.matmul(lse_col, ones_row)?;
                let centered = tape.sub(logits, spread)?;
                let probs = tape.exp(centered)?;
                let mut onehot = Tensor::zeros(&[n, *classes]);
                for (i, &lab) in labels.iter().enumerate() {
                    onehot.set(i, lab, 1.0);
                }
                let oh = tape.const_leaf(onehot);
                let delta = tape.sub(probs, oh)?;
                let dt = tape.transpose(delta)?;
                let grad_mat = tape.matmul(dt, fc)?; // [classes, d]
                let inv_n = tape.scalar_leaf(1.0 / n as f64);
                let scaled = tape.scalar_mul(inv_n, grad_mat)?;
                Ok(tape.reshape(scaled, vec![*classes * d])?)
            }
            Self::TvDenoise { y, lambda, side } => {
                let yc = tape.const_leaf(y.clone());
                let r = tape.sub(x, yc)?;
                let two = tape.scalar_leaf(2.0);
                let fid = tape.scalar_mul(two, r)?;
                let tv = tv_subgradient_graph(tape, x, *side, *lambda)?;
                Ok(tape.add(fid, tv)?)
            }
            Self::TvInpaint { y, mask, lambda, side } => {
                let yc = tape.const_leaf(y.clone());
                let mc = tape.const_leaf(mask.clone());
                let r0 = tape.sub(x, yc)?;
                let r = tape.mul(r0, mc)?;
                let two = tape.scalar_leaf(2.0);
                let fid = tape.scalar_mul(two, r)?;
                let tv = tv_subgradient_graph(tape, x, *side, *lambda)?;
                Ok(tape.add(fid, tv)?)
            }
        }
    }
}

/// lambda * ||Dx||_1 via |v| = max(0, v) + max(0, -v).
fn tv_graph(
    tape: &mut TapeGraph,
    x: NodeId,
    side: usize,
    lambda: f64,
) -> Result<NodeId, TapeError> {
    let dc = tape.const_leaf_keyed(0x7d1f0000 + side as u64, || tv_difference_matrix(side));
    let dx = tape.matvec(dc, x)?;
    let pos = tape.max_zero(dx)?;
    let neg1 = tape.scalar_leaf(-1.0);
    let ndx = tape.scalar_mul(neg1, dx)?;
    let neg = tape.max_zero(ndx)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum_reduce(both)?;
    let lam = tape.scalar_leaf(lambda);
    tape.scalar_mul(lam, total)
}

/// lambda * D' sign(Dx) with the sign frozen from the primal.
fn tv_subgradient_graph(
    tape: &mut TapeGraph,
    x: NodeId,
    side: usize,
    lambda: f64,
) -> Result<NodeId, TapeError> {
    let dc = tape.const_leaf_keyed(0x7d1f0000 + side as u64, || tv_difference_matrix(side));
    let dx = tape.matvec(dc, x)?;
    let s = tape.primal(dx).map(sign_zero);
    let sc = tape.const_leaf(s);
    let dtc = tape.const_leaf_keyed(0x7d2f0000 + side as u64, || {
        tv_difference_matrix(side).transpose().expect("difference operator is a matrix")
    });
    let pull = tape.matvec(dtc, sc)?;
    let lam = tape.scalar_leaf(lambda);
    tape.scalar_mul(lam, pull)
}

/// Gaussian class-conditional feature clusters: means on a radius-4 sphere,
/// unit within-class variance, balanced labels. Stand-in for an external
/// feature extractor.
pub fn synth_features(n: usize, d: usize, classes: usize, seed: u64) -> (Tensor, Vec<usize>) {
    assert!(n >= classes, "need at least one sample per class");
    let mut r = seeded(seed);
    let means: Vec<Tensor> = (0..classes)
        .map(|_| {
            let dir = rng::standard_normal_tensor(&mut r, &[d]);
            dir.scale(4.0 / dir.norm_l2())
        })
        .collect();
    let mut feats = Tensor::zeros(&[n, d]);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        let noise = rng::normal_vec(&mut r, d, 0.0, 1.0);
        for j in 0..d {
            feats.set(i, j, means[class].data()[j] + noise[j]);
        }
    }
    (feats, labels)
}

/// Piecewise-smooth synthetic grayscale image in [0, 1]: a base ramp plus a
/// few random constant rectangles.
pub fn synth_image(side: usize, r: &mut rand::rngs::StdRng) -> Tensor {
    let mut img = Tensor::zeros(&[side * side]);
    let ramp: f64 = r.gen_range(0.0..0.3);
    for i in 0..side {
        for j in 0..side {
            img.data_mut()[i * side + j] = ramp * (i + j) as f64 / (2 * side) as f64 + 0.2;
        }
    }
    let rects = r.gen_range(2..5);
    for _ in 0..rects {
        let i0 = r.gen_range(0..side - 2);
        let j0 = r.gen_range(0..side - 2);
        let h = r.gen_range(2..=side - i0);
        let w = r.gen_range(2..=side - j0);
        let level: f64 = r.gen_range(0.0..0.8);
        for i in i0..i0 + h {
            for j in j0..j0 + w {
                img.data_mut()[i * side + j] = (img.data()[i * side + j] + level).min(1.0);
            }
        }
    }
    img
}

/// Instance image for the TV classes: the class-wide base scene with one or
/// two small random rectangles added, the way one photographic class shares
/// most of its structure across samples.
fn instance_image(base: &Tensor, side: usize, r: &mut rand::rngs::StdRng) -> Tensor {
    let mut img = base.clone();
    let rects = r.gen_range(1..=2);
    for _ in 0..rects {
        let max_extent = (side / 2).max(3);
        let i0 = r.gen_range(0..side - 2);
        let j0 = r.gen_range(0..side - 2);
        let h = r.gen_range(2..=max_extent.min(side - i0));
        let w = r.gen_range(2..=max_extent.min(side - j0));
        let level: f64 = r.gen_range(-0.3..0.3);
        for i in i0..i0 + h {
            for j in j0..j0 + w {
                let v = (img.data()[i * side + j] + level).clamp(0.0, 1.0);
                img.data_mut()[i * side + j] = v;
            }
        }
    }
    img
}

/// Shared fixed parameters of a problem family plus its sampling seed.
#[derive(Debug, Clone)]
pub struct FunctionClass {
    pub kind: ProblemKind,
    pub seed: u64,
    pub dim: usize,
    /// Image side length for the TV kinds.
    pub side: usize,
    pub lambda: f64,
    pub svm_c: f64,
    /// Subset size drawn per instance for the SVM/classifier kinds.
    pub subset: usize,
    features: Option<(Tensor, Vec<usize>)>,
    inpaint_mask: Option<Tensor>,
    /// Class-wide base scene shared by every image instance.
    base_image: Option<Tensor>,
}

pub const IMAGE_NOISE_STD: f64 = 0.05;

impl FunctionClass {
    pub fn new(kind: ProblemKind, seed: u64) -> Self {
        let mut fc = Self {
            kind,
            seed,
            dim: match kind {
                ProblemKind::KlSimplex | ProblemKind::LsqSimplex => 10,
                ProblemKind::Lsq2d => 2,
                ProblemKind::SvmHinge => 51,
                ProblemKind::LinearClassifier => 500,
                ProblemKind::TvDenoise | ProblemKind::TvInpaint => 256,
            },
            side: 16,
            lambda: 0.3,
            svm_c: 1.0,
            subset: match kind {
                ProblemKind::SvmHinge => 1000,
                ProblemKind::LinearClassifier => 2000,
                _ => 0,
            },
            features: None,
            inpaint_mask: None,
            base_image: None,
        };
        match kind {
            ProblemKind::SvmHinge => {
                fc.features = Some(synth_features(2000, 50, 2, rng::derive(seed, 0xfea7)));
            }
            ProblemKind::LinearClassifier => {
                fc.features = Some(synth_features(4000, 50, 10, rng::derive(seed, 0xfea7)));
            }
            ProblemKind::TvDenoise => {
                let mut r = seeded(rng::derive(seed, 0xba5e));
                fc.base_image = Some(synth_image(fc.side, &mut r));
            }
            ProblemKind::TvInpaint => {
                let mut r = seeded(rng::derive(seed, 0xba5e));
                fc.base_image = Some(synth_image(fc.side, &mut r));
                // fixed mask with 20% zeros, drawn once from the class seed
                let mut r = seeded(rng::derive(seed, 0x3a5c));
                let n = fc.side * fc.side;
                let mut mask = Tensor::full(&[n], 1.0);
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut r);
                for &i in idx.iter().take(n / 5) {
                    mask.data_mut()[i] = 0.0;
                }
                fc.inpaint_mask = Some(mask);
            }
            _ => {}
        }
        fc
    }

    /// Image side configuration for the TV kinds.
    pub fn with_side(mut self, side: usize) -> Self {
        assert!(matches!(self.kind, ProblemKind::TvDenoise | ProblemKind::TvInpaint));
        self.side = side;
        self.dim = side * side;
        let mut r = seeded(rng::derive(self.seed, 0xba5e));
        self.base_image = Some(synth_image(side, &mut r));
        if self.kind == ProblemKind::TvInpaint {
            let mut r = seeded(rng::derive(self.seed, 0x3a5c));
            let n = side * side;
            let mut mask = Tensor::full(&[n], 1.0);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut r);
            for &i in idx.iter().take(n / 5) {
                mask.data_mut()[i] = 0.0;
            }
            self.inpaint_mask = Some(mask);
        }
        self
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        assert!(matches!(self.kind, ProblemKind::KlSimplex | ProblemKind::LsqSimplex));
        self.dim = dim;
        self
    }

    pub fn with_subset(mut self, subset: usize) -> Self {
        self.subset = subset;
        self
    }

    /// Deterministic problem instance for `instance_seed`.
    pub fn sample_problem(&self, instance_seed: u64) -> Problem {
        let mut r = seeded(rng::derive(self.seed, rng::derive(instance_seed, 0x1)));
        match self.kind {
            ProblemKind::KlSimplex => Problem::KlSimplex { y: rng::uniform_simplex(&mut r, self.dim) },
            ProblemKind::LsqSimplex => {
                Problem::LsqSimplex { y: rng::uniform_simplex(&mut r, self.dim) }
            }
            ProblemKind::Lsq2d => Problem::Lsq2d {
                w: Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap(),
                b: rng::standard_normal_tensor(&mut r, &[2]),
            },
            ProblemKind::SvmHinge => {
                let (feats, labels) = self.features.as_ref().unwrap();
                let n = feats.rows();
                let d = feats.cols();
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut r);
                idx.truncate(self.subset);
                let mut design = Tensor::zeros(&[self.subset, d + 1]);
                let mut lab = Vec::with_capacity(self.subset);
                for (row, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        design.set(row, j, feats.at(i, j));
                    }
                    design.set(row, d, 1.0);
                    lab.push(if labels[i] == 0 { -1.0 } else { 1.0 });
                }
                Problem::SvmHinge { design, labels: Tensor::vector(lab), c: self.svm_c }
            }
            ProblemKind::LinearClassifier => {
                let (feats, labels) = self.features.as_ref().unwrap();
                let n = feats.rows();
                let d = feats.cols();
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut r);
                idx.truncate(self.subset);
                let mut sub = Tensor::zeros(&[self.subset, d]);
                let mut lab = Vec::with_capacity(self.subset);
                for (row, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        sub.set(row, j, feats.at(i, j));
                    }
                    lab.push(labels[i]);
                }
                Problem::LinearClassifier { features: sub, labels: lab, classes: 10 }
            }
            ProblemKind::TvDenoise => {
                let clean = instance_image(self.base_image.as_ref().unwrap(), self.side, &mut r);
                let noise = rng::normal_vec(&mut r, clean.len(), 0.0, IMAGE_NOISE_STD);
                let y = Tensor::vector(
                    clean
                        .data()
                        .iter()
                        .zip(noise)
                        .map(|(&v, e)| (v + e).clamp(0.0, 1.0))
                        .collect(),
                );
                Problem::TvDenoise { y, lambda: self.lambda, side: self.side }
            }
            ProblemKind::TvInpaint => {
                let mask = self.inpaint_mask.clone().unwrap();
                let clean = instance_image(self.base_image.as_ref().unwrap(), self.side, &mut r);
                let noise = rng::normal_vec(&mut r, clean.len(), 0.0, IMAGE_NOISE_STD);
                let y = Tensor::vector(
                    clean
                        .data()
                        .iter()
                        .zip(noise)
                        .enumerate()
                        .map(|(i, (&v, e))| ((v * mask.data()[i]) + e).clamp(0.0, 1.0))
                        .collect(),
                );
                Problem::TvInpaint { y, mask, lambda: self.lambda, side: self.side }
            }
        }
    }

    /// Deterministic initial point for a sampled problem: standard normal
    /// for the vector kinds, interior simplex point for the simplex kinds,
    /// the noisy image itself for the TV kinds.
    pub fn sample_initial(&self, prob: &Problem, init_seed: u64) -> Tensor {
        let mut r = seeded(rng::derive(self.seed, rng::derive(init_seed, 0x2)));
        match prob {
            Problem::KlSimplex { .. } | Problem::LsqSimplex { .. } => {
                rng::uniform_simplex(&mut r, self.dim)
            }
            Problem::Lsq2d { .. } => rng::standard_normal_tensor(&mut r, &[2]),
            Problem::SvmHinge { design, .. } => {
                rng::standard_normal_tensor(&mut r, &[design.cols()])
            }
            Problem::LinearClassifier { features, classes, .. } => {
                rng::standard_normal_tensor(&mut r, &[features.cols() * classes])
            }
            Problem::TvDenoise { y, .. } | Problem::TvInpaint { y, .. } => y.clone(),
        }
    }

    /// One (problem, initial point) draw.
    pub fn sample_instance(&self, instance_seed: u64) -> (Problem, Tensor) {
        let prob = self.sample_problem(instance_seed);
        let x0 = self.sample_initial(&prob, instance_seed);
        (prob, x0)
    }

    /// The fixed feature pool for the SVM/classifier kinds.
    pub fn features(&self) -> Option<(&Tensor, &[usize])> {
        self.features.as_ref().map(|(f, l)| (f, l.as_slice()))
    }
}

/// Reference point from a long plain subgradient-descent run, for problems
/// without a closed-form minimizer.
pub fn reference_via_gd(prob: &Problem, x0: &Tensor, steps: usize, step: f64) -> Tensor {
    let mut x = x0.clone();
    let mut best = x.clone();
    let mut best_f = prob.objective(&x).unwrap_or(f64::INFINITY);
    for _ in 0..steps {
        let g = match prob.subgradient(&x) {
            Ok(g) => g,
            Err(_) => break,
        };
        x.axpy(-step, &g);
        if let Ok(f) = prob.objective(&x) {
            if f < best_f {
                best_f = f;
                best = x.clone();
            }
        }
    }
    best
}

/// CSV dump of a feature matrix with a trailing label column.
pub fn features_to_csv(features: &Tensor, labels: &[usize]) -> String {
    let mut out = String::new();
    let (n, d) = (features.rows(), features.cols());
    for i in 0..n {
        for j in 0..d {
            out.push_str(&format!("{}", features.at(i, j)));
            out.push(',');
        }
        out.push_str(&format!("{}\n", labels[i]));
    }
    out
}

/// CSV dump of flattened images, one row of side*side values per image.
pub fn images_to_csv(images: &[Tensor]) -> String {
    let mut out = String::new();
    for img in images {
        let vals: Vec<String> = img.data().iter().map(|v| format!("{v}")).collect();
        out.push_str(&vals.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal_tensor;

    #[test]
    fn lsq2d_carries_fixed_w() {
        let fc = FunctionClass::new(ProblemKind::Lsq2d, 7);
        let (prob, _) = fc.sample_instance(0);
        if let Problem::Lsq2d { w, .. } = &prob {
            assert_eq!(w.data(), &[2.0, 1.0, 1.0, 2.0]);
        } else {
            unreachable!();
        }
    }

    #[test]
    fn class_constants_match() {
        let fc = FunctionClass::new(ProblemKind::TvDenoise, 1);
        assert_eq!(fc.lambda, 0.3);
        let fc = FunctionClass::new(ProblemKind::SvmHinge, 1);
        assert_eq!(fc.svm_c, 1.0);
    }

    #[test]
    fn kl_at_target_is_zero_with_ones_subgradient() {
        let y = Tensor::vector(vec![0.25, 0.75]);
        let prob = Problem::KlSimplex { y: y.clone() };
        assert_eq!(prob.objective(&y).unwrap(), 0.0);
        let g = prob.subgradient(&y).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        assert_eq!(prob.true_minimizer().unwrap(), y);
    }

    #[test]
    fn hinge_inactive_at_perfect_margin() {
        // strict margins: scores agree with labels by more than 1
        let design = Tensor::matrix(2, 3, vec![2.0, 0.0, 1.0, -2.0, 0.0, 1.0]).unwrap();
        let labels = Tensor::vector(vec![1.0, -1.0]);
        let prob = Problem::SvmHinge { design, labels, c: 1.0 };
        let x = Tensor::vector(vec![2.0, 1.0, 0.0]); // w = (2, 1), b = 0; scores ±4
        let f = prob.objective(&x).unwrap();
        assert!((f - 2.5).abs() < 1e-15); // 1/2 ||w||^2
        let g = prob.subgradient(&x).unwrap();
        assert_eq!(g.data(), &[2.0, 1.0, 0.0]); // (w, 0)
    }

    #[test]
    fn tv_of_constant_and_step_edge() {
        let side = 4;
        let lambda = 0.3;
        let flat = Tensor::full(&[16], 0.7);
        let prob = Problem::TvDenoise { y: flat.clone(), lambda, side };
        // constant image: only the fidelity term, which is zero at y
        assert_eq!(prob.objective(&flat).unwrap(), 0.0);

        // single vertical step edge of height h between columns 1 and 2:
        // one horizontal difference of magnitude h per row, m rows total
        let h = 0.4;
        let mut img = Tensor::zeros(&[16]);
        for i in 0..side {
            for j in 2..side {
                img.data_mut()[i * side + j] = h;
            }
        }
        let prob = Problem::TvDenoise { y: img.clone(), lambda, side };
        let f = prob.objective(&img).unwrap();
        assert!((f - lambda * side as f64 * h).abs() < 1e-12);
    }

    #[test]
    fn lsq2d_minimizer_closed_form() {
        let w = Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let b = Tensor::vector(vec![3.0, 3.0]);
        let prob = Problem::Lsq2d { w, b };
        let m = prob.true_minimizer().unwrap();
        assert!((m.data()[0] - 1.0).abs() < 1e-12);
        assert!((m.data()[1] - 1.0).abs() < 1e-12);
        assert!(Problem::TvDenoise {
            y: Tensor::zeros(&[16]),
            lambda: 0.3,
            side: 4
        }
        .true_minimizer()
        .is_none());
    }

    #[test]
    fn synth_features_deterministic_and_balanced() {
        let (f1, l1) = synth_features(100, 50, 2, 9);
        let (f2, l2) = synth_features(100, 50, 2, 9);
        assert_eq!(f1, f2);
        assert_eq!(l1, l2);
        assert_eq!(l1.iter().filter(|&&l| l == 0).count(), 50);
    }

    #[test]
    fn subgradient_inequality_all_kinds() {
        // f(z) >= f(x) + <g(x), z - x> - 1e-9 on random pairs
        let mut r = seeded(42);
        let classes: Vec<FunctionClass> = vec![
            FunctionClass::new(ProblemKind::KlSimplex, 3),
            FunctionClass::new(ProblemKind::LsqSimplex, 3),
            FunctionClass::new(ProblemKind::Lsq2d, 3),
            FunctionClass::new(ProblemKind::SvmHinge, 3).with_subset(40),
            FunctionClass::new(ProblemKind::LinearClassifier, 3).with_subset(40),
            FunctionClass::new(ProblemKind::TvDenoise, 3).with_side(6),
            FunctionClass::new(ProblemKind::TvInpaint, 3).with_side(6),
        ];
        for fc in classes {
            let (prob, _) = fc.sample_instance(0);
            for _ in 0..500 {
                let (x, z) = match prob.domain() {
                    Domain::SimplexInterior => (
                        rng::uniform_simplex(&mut r, prob.dim()),
                        rng::uniform_simplex(&mut r, prob.dim()),
                    ),
                    Domain::Reals => (
                        standard_normal_tensor(&mut r, &[prob.dim()]),
                        standard_normal_tensor(&mut r, &[prob.dim()]),
                    ),
                };
                let fx = prob.objective(&x).unwrap();
                let fz = prob.objective(&z).unwrap();
                let g = prob.subgradient(&x).unwrap();
                let lin = g.dot(&z.sub(&x).unwrap()).unwrap();
                assert!(
                    fz >= fx + lin - 1e-9,
                    "{}: violated by {}",
                    prob.kind().name(),
                    fx + lin - fz
                );
            }
        }
    }

    #[test]
    fn kl_nonnegative_and_zero_only_at_target() {
        let mut r = seeded(5);
        let y = rng::uniform_simplex(&mut r, 6);
        let prob = Problem::KlSimplex { y: y.clone() };
        assert_eq!(prob.objective(&y).unwrap(), 0.0);
        for _ in 0..100 {
            let x = rng::uniform_simplex(&mut r, 6);
            let f = prob.objective(&x).unwrap();
            assert!(f >= 0.0);
            if x.sub(&y).unwrap().norm_linf() > 1e-6 {
                assert!(f > 0.0);
            }
        }
    }

    #[test]
    fn inpaint_with_full_mask_equals_denoise() {
        let mut r = seeded(8);
        let side = 6;
        let y = synth_image(side, &mut r);
        let den = Problem::TvDenoise { y: y.clone(), lambda: 0.3, side };
        let inp = Problem::TvInpaint {
            y: y.clone(),
            mask: Tensor::full(&[side * side], 1.0),
            lambda: 0.3,
            side,
        };
        for _ in 0..20 {
            let x = standard_normal_tensor(&mut r, &[side * side]).scale(0.3);
            assert_eq!(den.objective(&x).unwrap(), inp.objective(&x).unwrap());
            assert_eq!(den.subgradient(&x).unwrap(), inp.subgradient(&x).unwrap());
        }
    }

    #[test]
    fn images_stay_in_unit_range() {
        let fc = FunctionClass::new(ProblemKind::TvDenoise, 4);
        for s in 0..10 {
            let (prob, x0) = fc.sample_instance(s);
            if let Problem::TvDenoise { y, .. } = &prob {
                assert_eq!(y.len(), 256);
                assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert_eq!(&x0, y, "initial point must be the noisy image");
            }
        }
    }

    #[test]
    fn graphs_match_plain_evaluation() {
        let mut r = seeded(99);
        let classes: Vec<FunctionClass> = vec![
            FunctionClass::new(ProblemKind::KlSimplex, 11),
            FunctionClass::new(ProblemKind::LsqSimplex, 11),
            FunctionClass::new(ProblemKind::Lsq2d, 11),
            FunctionClass::new(ProblemKind::SvmHinge, 11).with_subset(30),
            FunctionClass::new(ProblemKind::LinearClassifier, 11).with_subset(30),
            FunctionClass::new(ProblemKind::TvDenoise, 11).with_side(5),
            FunctionClass::new(ProblemKind::TvInpaint, 11).with_side(5),
        ];
        for fc in classes {
            let (prob, _) = fc.sample_instance(1);
            for _ in 0..10 {
                let x = match prob.domain() {
                    Domain::SimplexInterior => rng::uniform_simplex(&mut r, prob.dim()),
                    Domain::Reals => standard_normal_tensor(&mut r, &[prob.dim()]),
                };
                let mut tape = TapeGraph::new();
                let xn = tape.leaf(x.clone());
                let obj = prob.objective_graph(&mut tape, xn).unwrap();
                let sub = prob.subgradient_graph(&mut tape, xn).unwrap();
                let plain_obj = prob.objective(&x).unwrap();
                let plain_sub = prob.subgradient(&x).unwrap();
                assert!(
                    (tape.primal(obj).scalar_value() - plain_obj).abs()
                        <= 1e-12 * plain_obj.abs().max(1.0),
                    "{} objective mismatch",
                    prob.kind().name()
                );
                let diff = tape.primal(sub).sub(&plain_sub).unwrap().norm_linf();
                assert!(diff <= 1e-10, "{} subgradient mismatch {diff}", prob.kind().name());
            }
        }
    }

    #[test]
    fn synthetic_clusters_are_learnable() {
        // a linear classifier trained to convergence separates the clusters
        let (feats, labels) = synth_features(400, 50, 2, 13);
        let prob = Problem::LinearClassifier {
            features: feats.clone(),
            labels: labels.clone(),
            classes: 2,
        };
        let mut x = Tensor::zeros(&[2 * 50]);
        for _ in 0..400 {
            let g = prob.subgradient(&x).unwrap();
            x.axpy(-0.5, &g);
        }
        let mut correct = 0;
        for i in 0..feats.rows() {
            let mut best = (f64::NEG_INFINITY, 0);
            for k in 0..2 {
                let mut s = 0.0;
                for j in 0..50 {
                    s += x.data()[k * 50 + j] * feats.at(i, j);
                }
                if s > best.0 {
                    best = (s, k);
                }
            }
            if best.1 == labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / feats.rows() as f64;
        assert!(acc >= 0.95, "accuracy {acc}");
    }
}
