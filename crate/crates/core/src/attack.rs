//! Gradient-matching reconstruction.
//!
//! Both attacks start from shared gradients `∇W` produced by a private
//! `(x, c)` and minimise `‖∇W' − ∇W‖²` over a dummy input:
//!
//! * iDLG reads the label off the output-layer gradient first and then
//!   optimises the dummy image alone, with the recovered one-hot label.
//! * DLG optimises the dummy image together with free label logits whose
//!   softmax serves as a soft label; its label guess is the argmax of the
//!   final logits.
//!
//! One iteration is one optimizer step. L-BFGS takes a two-loop-recursion
//! direction and backtracks from the learning rate until the Armijo
//! condition holds.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::leakage::extract_label;
use crate::model::{GradSet, Label, Model};
use crate::tensor::{dot, mse, softmax, Rng, Tensor};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];
pub const ARMIJO_C1: f64 = 1e-4;
pub const MAX_BACKTRACKS: usize = 20;
/// Curvature pairs with `s·y` at or below this are not stored.
pub const MIN_CURVATURE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Idlg,
    Dlg,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Idlg => "idlg",
            Method::Dlg => "dlg",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idlg" => Ok(Method::Idlg),
            "dlg" => Ok(Method::Dlg),
            _ => Err(Error::InvalidArgument(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Lbfgs,
    Gd,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Lbfgs => "lbfgs",
            Optimizer::Gd => "gd",
        })
    }
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lbfgs" => Ok(Optimizer::Lbfgs),
            "gd" => Ok(Optimizer::Gd),
            _ => Err(Error::InvalidArgument(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub method: Method,
    /// Optimizer steps; 0 returns the initial guess untouched.
    pub iterations: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub lbfgs_history: usize,
    /// Seed of the dummy initialisation.
    pub seed: u64,
    /// Keep a copy of the dummy every this many iterations (0 = never).
    pub snapshot_every: usize,
    /// MSE thresholds for `iterations_to_threshold`.
    pub thresholds: Vec<f64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            method: Method::Idlg,
            iterations: 300,
            optimizer: Optimizer::Lbfgs,
            learning_rate: 1.0,
            lbfgs_history: 10,
            seed: 0,
            snapshot_every: 0,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.lbfgs_history == 0 {
            return Err(Error::InvalidArgument("lbfgs history must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackReport {
    pub method: Method,
    pub extracted_label: usize,
    pub label_exact: bool,
    pub final_dummy: Tensor,
    /// DLG only: the optimised label logits.
    pub final_label_logits: Option<Tensor>,
    /// Matching loss before each step, then after the last one.
    pub loss_trajectory: Vec<f64>,
    /// MSE against the true input at the same points, when it was supplied.
    pub mse_trajectory: Option<Vec<f64>>,
    pub snapshots: Vec<(usize, Tensor)>,
    /// `(threshold, first iteration with MSE below it)`.
    pub iterations_to_threshold: Vec<(f64, Option<usize>)>,
    /// Iterations whose step came from a fallback: non-finite line-search
    /// trial or exhausted backtracking.
    pub fallback_steps: Vec<usize>,
}

impl AttackReport {
    pub fn final_mse(&self) -> Option<f64> {
        self.mse_trajectory.as_ref().and_then(|m| m.last().copied())
    }

    pub fn min_mse(&self) -> Option<f64> {
        self.mse_trajectory
            .as_ref()
            .map(|m| m.iter().copied().fold(f64::INFINITY, f64::min))
    }

    pub fn iterations_to(&self, threshold: f64) -> Option<usize> {
        self.iterations_to_threshold
            .iter()
            .find(|(t, _)| *t == threshold)
            .and_then(|(_, it)| *it)
    }
}

/// `x − η·grad`.
pub fn gd_step(x: &Tensor, grad: &Tensor, eta: f64) -> Result<Tensor> {
    x.zip_with(grad, |xi, gi| xi - eta * gi)
}

/// Objective value and gradient at a point.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LbfgsState {
    capacity: usize,
    /// `(s, y, 1 / s·y)`, oldest first.
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

impl LbfgsState {
    pub fn new(capacity: usize) -> Self {
        LbfgsState {
            capacity: capacity.max(1),
            pairs: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stores a curvature pair if `s·y > MIN_CURVATURE`; returns whether it
    /// was kept.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        if !(sy > MIN_CURVATURE) {
            return false;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
        true
    }

    /// `−H·grad` by the two-loop recursion, with the initial inverse Hessian
    /// scaled by `s·y / y·y` of the newest pair.
    pub fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub x: Vec<f64>,
    pub eval: Evaluation,
    pub step_length: f64,
    /// The accepted point did not come from a successful Armijo search.
    pub fallback: bool,
}

/// One L-BFGS step with Armijo backtracking from `eta`.
///
/// A non-finite trial value abandons the search and takes a gradient step of
/// length `eta / 10` instead. If backtracking runs out, the last trial point
/// is taken. Both cases set `fallback`. An error is returned only when the
/// objective itself fails or the fallback point is non-finite too.
pub fn lbfgs_step(
    state: &mut LbfgsState,
    x: &[f64],
    current: &Evaluation,
    objective: &mut dyn FnMut(&[f64]) -> Result<Evaluation>,
    eta: f64,
) -> Result<StepOutcome> {
    let mut dir = state.direction(&current.grad);
    let mut slope = dot(&current.grad, &dir);
    if slope > 0.0 {
        // stale curvature; restart from steepest descent
        state.pairs.clear();
        dir = current.grad.iter().map(|g| -g).collect();
        slope = dot(&current.grad, &dir);
    }

    let mut alpha = eta;
    let mut accepted = None;
    let mut fallback = false;
    for k in 0..=MAX_BACKTRACKS {
        let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + alpha * di).collect();
        let eval = objective(&trial)?;
        if !eval.loss.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
            let step = eta / 10.0;
            let x_gd: Vec<f64> = x
                .iter()
                .zip(&current.grad)
                .map(|(xi, gi)| xi - step * gi)
                .collect();
            let eval = objective(&x_gd)?;
            if !eval.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: 0,
                    value: eval.loss,
                });
            }
            accepted = Some((x_gd, eval, step));
            fallback = true;
            break;
        }
        if eval.loss <= current.loss + ARMIJO_C1 * alpha * slope {
            accepted = Some((trial, eval, alpha));
            break;
        }
        if k == MAX_BACKTRACKS {
            accepted = Some((trial, eval, alpha));
            fallback = true;
            break;
        }
        alpha *= 0.5;
    }
    let (x_new, eval, step_length) = accepted.expect("loop always accepts a point");

    let s: Vec<f64> = x_new.iter().zip(x).map(|(a, b)| a - b).collect();
    let y: Vec<f64> = eval.grad.iter().zip(&current.grad).map(|(a, b)| a - b).collect();
    state.push(s, y);
    Ok(StepOutcome {
        x: x_new,
        eval,
        step_length,
        fallback,
    })
}

struct Trajectory {
    losses: Vec<f64>,
    mses: Option<Vec<f64>>,
    snapshots: Vec<(usize, Tensor)>,
    fallback_steps: Vec<usize>,
}

/// Runs the configured optimizer over a flat parameter vector whose first
/// `image_shape` elements are the dummy image.
fn optimize(
    x0: Vec<f64>,
    image_shape: &[usize],
    config: &AttackConfig,
    ground_truth: Option<&Tensor>,
    objective: &mut dyn FnMut(&[f64]) -> Result<Evaluation>,
) -> Result<(Vec<f64>, Trajectory)> {
    let image_len: usize = image_shape.iter().product();
    let image_of = |v: &[f64]| Tensor::new(image_shape, v[..image_len].to_vec());
    let mut traj = Trajectory {
        losses: Vec::with_capacity(config.iterations + 1),
        mses: ground_truth.map(|_| Vec::with_capacity(config.iterations + 1)),
        snapshots: Vec::new(),
        fallback_steps: Vec::new(),
    };
    let record = |t: usize, x: &[f64], loss: f64, traj: &mut Trajectory| -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: t,
                value: loss,
            });
        }
        traj.losses.push(loss);
        let img = image_of(x)?;
        if let (Some(m), Some(gt)) = (traj.mses.as_mut(), ground_truth) {
            m.push(mse(&img, gt)?);
        }
        if config.snapshot_every > 0 && t % config.snapshot_every == 0 {
            traj.snapshots.push((t, img));
        }
        Ok(())
    };

    let mut x = x0;
    let mut current = objective(&x)?;
    let mut lbfgs = LbfgsState::new(config.lbfgs_history);
    for t in 0..config.iterations {
        record(t, &x, current.loss, &mut traj)?;
        match config.optimizer {
            Optimizer::Gd => {
                x.iter_mut()
                    .zip(&current.grad)
                    .for_each(|(xi, gi)| *xi -= config.learning_rate * gi);
                current = objective(&x)?;
            }
            Optimizer::Lbfgs => {
                let out = lbfgs_step(&mut lbfgs, &x, &current, objective, config.learning_rate)
                    .map_err(|e| match e {
                        Error::NonFiniteLoss { value, .. } => Error::NonFiniteLoss { iteration: t, value },
                        e => e,
                    })?;
                if out.fallback {
                    traj.fallback_steps.push(t);
                }
                x = out.x;
                current = out.eval;
            }
        }
    }
    record(config.iterations, &x, current.loss, &mut traj)?;
    Ok((x, traj))
}

fn check_ground_truth(model: &Model, gt: Option<&Tensor>) -> Result<()> {
    match gt {
        Some(t) if t.shape() != model.arch().input_shape() => Err(Error::dim(format!(
            "ground truth shape {:?}, model input {:?}",
            t.shape(),
            model.arch().input_shape()
        ))),
        _ => Ok(()),
    }
}

fn thresholds_reached(config: &AttackConfig, mses: Option<&Vec<f64>>) -> Vec<(f64, Option<usize>)> {
    config
        .thresholds
        .iter()
        .map(|&tau| (tau, mses.and_then(|m| m.iter().position(|&v| v < tau))))
        .collect()
}

/// Improved DLG from a fresh `N(0, 1)` dummy drawn with `config.seed`.
pub fn run_idlg(
    model: &Model,
    shared: &GradSet,
    config: &AttackConfig,
    ground_truth: Option<&Tensor>,
) -> Result<AttackReport> {
    let init = Rng::new(config.seed).sample_normal(&model.arch().input_shape());
    run_idlg_from(model, shared, config, init, ground_truth)
}

/// Improved DLG from an explicit initial dummy.
pub fn run_idlg_from(
    model: &Model,
    shared: &GradSet,
    config: &AttackConfig,
    init: Tensor,
    ground_truth: Option<&Tensor>,
) -> Result<AttackReport> {
    if config.method != Method::Idlg {
        return Err(Error::InvalidArgument("run_idlg called with a non-idlg config".into()));
    }
    config.validate()?;
    check_ground_truth(model, ground_truth)?;
    let shape = model.arch().input_shape();
    if init.shape() != shape {
        return Err(Error::dim(format!("initial dummy {:?}, expected {shape:?}", init.shape())));
    }
    let prediction = extract_label(shared.fc_w())?;
    let label = prediction.label;

    let mut objective = |v: &[f64]| -> Result<Evaluation> {
        let x = Tensor::new(&shape, v.to_vec())?;
        let m = model.grad_match(&x, Label::Hard(label), shared)?;
        Ok(Evaluation {
            loss: m.loss,
            grad: m.input_grad.into_data(),
        })
    };
    let (x, traj) = optimize(init.into_data(), &shape, config, ground_truth, &mut objective)?;
    Ok(AttackReport {
        method: Method::Idlg,
        extracted_label: label,
        label_exact: prediction.exact,
        final_dummy: Tensor::new(&shape, x)?,
        final_label_logits: None,
        iterations_to_threshold: thresholds_reached(config, traj.mses.as_ref()),
        loss_trajectory: traj.losses,
        mse_trajectory: traj.mses,
        snapshots: traj.snapshots,
        fallback_steps: traj.fallback_steps,
    })
}

/// Original DLG: dummy image and free label logits, both `N(0, 1)` from
/// `config.seed` (image first), optimised jointly.
pub fn run_dlg(
    model: &Model,
    shared: &GradSet,
    config: &AttackConfig,
    ground_truth: Option<&Tensor>,
) -> Result<AttackReport> {
    if config.method != Method::Dlg {
        return Err(Error::InvalidArgument("run_dlg called with a non-dlg config".into()));
    }
    config.validate()?;
    check_ground_truth(model, ground_truth)?;
    let shape = model.arch().input_shape();
    let classes = model.arch().num_classes;
    let image_len: usize = shape.iter().product();

    let mut rng = Rng::new(config.seed);
    let mut v = rng.sample_normal(&shape).into_data();
    v.extend(rng.sample_normal(&[classes]).into_data());

    let mut objective = |v: &[f64]| -> Result<Evaluation> {
        let x = Tensor::new(&shape, v[..image_len].to_vec())?;
        let p = softmax(&v[image_len..]);
        let soft = Tensor::from_vec(p.clone());
        let m = model.grad_match(&x, Label::Soft(&soft), shared)?;
        let lg = m.label_grad.expect("soft label yields a label gradient");
        // chain through p = softmax(z)
        let p_dot = dot(&p, lg.data());
        let mut grad = m.input_grad.into_data();
        grad.extend(p.iter().zip(lg.data()).map(|(pi, gi)| pi * (gi - p_dot)));
        Ok(Evaluation { loss: m.loss, grad })
    };
    let (v, traj) = optimize(v, &shape, config, ground_truth, &mut objective)?;
    let logits = v[image_len..].to_vec();
    let extracted_label = argmax(&logits);
    Ok(AttackReport {
        method: Method::Dlg,
        extracted_label,
        label_exact: false,
        final_dummy: Tensor::new(&shape, v[..image_len].to_vec())?,
        final_label_logits: Some(Tensor::from_vec(logits)),
        iterations_to_threshold: thresholds_reached(config, traj.mses.as_ref()),
        loss_trajectory: traj.losses,
        mse_trajectory: traj.mses,
        snapshots: traj.snapshots,
        fallback_steps: traj.fallback_steps,
    })
}

pub fn run_attack(
    model: &Model,
    shared: &GradSet,
    config: &AttackConfig,
    ground_truth: Option<&Tensor>,
) -> Result<AttackReport> {
    match config.method {
        Method::Idlg => run_idlg(model, shared, config, ground_truth),
        Method::Dlg => run_dlg(model, shared, config, ground_truth),
    }
}

/// First index of the largest value.
fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}
