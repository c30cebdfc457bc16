//! Plug-and-play, unrolled and equilibrium reconstruction.
//!
//! All three engines share one iteration map
//! `T(x) = D(x - γ Aᴴ(Ax - y))`, recorded on the tape so that the unrolled
//! network can be trained end to end and the equilibrium model can take
//! vector-Jacobian products of a single step.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use indexmap::IndexMap;
use log::warn;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Mode;
use crate::model::{Network, ParamVars};
use crate::physics::{operator_norm_sq, LinearOperator};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMode {
    Pnp,
    Unrolled,
    Deq,
}

impl FromStr for SolverMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pnp" => Ok(SolverMode::Pnp),
            "unrolled" | "du" => Ok(SolverMode::Unrolled),
            "deq" => Ok(SolverMode::Deq),
            other => Err(Error::Config(format!("unknown solver mode `{other}`"))),
        }
    }
}

impl fmt::Display for SolverMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverMode::Pnp => "pnp",
            SolverMode::Unrolled => "unrolled",
            SolverMode::Deq => "deq",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub gamma: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub mode: SolverMode,
    pub unroll_depth: usize,
    /// Stopping rule of the adjoint fixed-point solve in the DEQ backward pass.
    pub backward_tol: f64,
    pub backward_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            gamma: 1.0,
            max_iter: 100,
            tol: 1e-4,
            mode: SolverMode::Deq,
            unroll_depth: 5,
            backward_tol: 1e-6,
            backward_max_iter: 50,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Config(format!(
                "solver needs gamma > 0, tol > 0, max_iter >= 1 (got {}, {}, {})",
                self.gamma, self.tol, self.max_iter
            )));
        }
        if self.mode == SolverMode::Unrolled && self.unroll_depth > self.max_iter {
            return Err(Error::Config(format!(
                "unroll depth {} exceeds max_iter {}",
                self.unroll_depth, self.max_iter
            )));
        }
        if !(self.backward_tol > 0.0) || self.backward_max_iter == 0 {
            return Err(Error::Config("backward solve needs tol > 0 and max_iter >= 1".into()));
        }
        Ok(())
    }
}

/// Step size `1/‖A‖²` from a power-iteration estimate.
pub fn default_gamma(op: &dyn LinearOperator) -> Result<f64> {
    let l = operator_norm_sq(op, 50, 0)?;
    if !(l > 0.0) {
        return Err(Error::invalid("default_gamma", "operator norm estimate is zero"));
    }
    Ok(1.0 / l)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveTrace {
    /// `‖x^{k+1} - x^k‖ / ‖x^k‖` for each iteration.
    pub rel_changes: Vec<f64>,
    /// Seconds since the start of the solve, after each iteration.
    pub times: Vec<f64>,
    pub converged: bool,
}

impl SolveTrace {
    pub fn iterations(&self) -> usize {
        self.rel_changes.len()
    }

    pub fn elapsed(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "rel_change", "seconds"])?;
        for (i, (r, t)) in self.rel_changes.iter().zip(&self.times).enumerate() {
            out.write_record([(i + 1).to_string(), format!("{r:e}"), format!("{t:.6}")])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Relative change with the conventions 0/0 = 0 and c/0 = ∞ for c > 0.
pub fn relative_change(next: &Tensor, prev: &Tensor) -> Result<f64> {
    let diff = next.sub(prev)?.norm();
    let base = prev.norm();
    Ok(if base > 0.0 {
        diff / base
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    })
}

fn check_finite(x: &Tensor, what: &str, iteration: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{what}: non-finite iterate at iteration {iteration}")))
    }
}

/// Iterate `x <- step(x)` until the relative change drops below `tol` or
/// `max_iter` steps have been taken.
pub fn solve_fixed_point(
    x0: &Tensor,
    mut step: impl FnMut(&Tensor) -> Result<Tensor>,
    tol: f64,
    max_iter: usize,
) -> Result<(Tensor, SolveTrace)> {
    if !(tol > 0.0) {
        return Err(Error::invalid("solve_fixed_point", format!("tol must be positive, got {tol}")));
    }
    let start = Instant::now();
    let mut trace = SolveTrace::default();
    let mut x = x0.clone();
    for k in 0..max_iter {
        let next = step(&x)?;
        check_finite(&next, "fixed-point solve", k + 1)?;
        let r = relative_change(&next, &x)?;
        trace.rel_changes.push(r);
        trace.times.push(start.elapsed().as_secs_f64());
        x = next;
        if r < tol {
            trace.converged = true;
            break;
        }
    }
    Ok((x, trace))
}

/// Everything one iteration needs besides the iterate and the measurements.
#[derive(Clone)]
pub struct PnpProblem<'a> {
    pub op: Arc<dyn LinearOperator>,
    pub net: &'a Network,
    pub gamma: f64,
    /// BN mode inside the denoiser.
    pub mode: Mode,
}

impl<'a> PnpProblem<'a> {
    pub fn new(op: Arc<dyn LinearOperator>, net: &'a Network, gamma: f64) -> Self {
        PnpProblem {
            op,
            net,
            gamma,
            mode: Mode::Eval,
        }
    }

    /// Apply the denoiser; complex images pass through as (re, im) channels.
    pub fn record_denoise(&self, tape: &mut Tape, params: &ParamVars, z: Var) -> Result<Var> {
        let complex = tape.value(z)?.is_complex();
        let input = if complex { tape.complex_to_channels(z)? } else { z };
        let out = self.net.forward_with(tape, params, input, self.mode)?.output;
        if complex {
            tape.channels_to_complex(out)
        } else {
            Ok(out)
        }
    }

    /// `D(x - γ Aᴴ(Ax - y))` on the tape.
    pub fn record_step(&self, tape: &mut Tape, params: &ParamVars, x: Var, y: Var) -> Result<Var> {
        let ax = tape.apply_op(&self.op, x)?;
        let r = tape.sub(ax, y)?;
        let g = tape.apply_adjoint(&self.op, r)?;
        let g = tape.scale(g, self.gamma)?;
        let z = tape.sub(x, g)?;
        self.record_denoise(tape, params, z)
    }

    /// `x⁰ = Aᴴy` followed by `depth` weight-tied steps.
    pub fn record_unrolled(&self, tape: &mut Tape, params: &ParamVars, y: Var, depth: usize) -> Result<Var> {
        let mut x = tape.apply_adjoint(&self.op, y)?;
        for k in 0..depth {
            x = self.record_step(tape, params, x, y)?;
            check_finite(tape.value(x)?, "unrolled network", k + 1)?;
        }
        Ok(x)
    }

    pub fn step(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.net.register(&mut tape, false)?;
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let out = self.record_step(&mut tape, &params, xv, yv)?;
        let out = tape.value(out)?.clone();
        check_finite(&out, "pnp step", 1)?;
        Ok(out)
    }

    pub fn init(&self, y: &Tensor) -> Result<Tensor> {
        self.op.adjoint(y)
    }
}

/// One plug-and-play proximal-gradient step.
pub fn pnp_step(x: &Tensor, y: &Tensor, op: &Arc<dyn LinearOperator>, net: &Network, gamma: f64) -> Result<Tensor> {
    PnpProblem::new(op.clone(), net, gamma).step(x, y)
}

/// `Aᴴy` followed by `depth` shared-weight steps, without recording.
pub fn unrolled_forward(
    y: &Tensor,
    op: &Arc<dyn LinearOperator>,
    net: &Network,
    gamma: f64,
    depth: usize,
) -> Result<Tensor> {
    let p = PnpProblem::new(op.clone(), net, gamma);
    let mut x = p.init(y)?;
    for _ in 0..depth {
        x = p.step(&x, y)?;
    }
    Ok(x)
}

/// An iteration map whose parameters can be put on a tape.
pub trait FixedPointMap {
    /// Record `T(x)`, registering parameters as named trainable leaves.
    fn record(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

/// Status of the adjoint solve in an implicit backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImplicitInfo {
    pub iterations: usize,
    pub rel_change: f64,
    pub truncated: bool,
}

/// Implicit gradient at a fixed point `x̄ = T(x̄)`: solves
/// `v = (∂T/∂x)ᵀ v + upstream` by iterating vector-Jacobian products, then
/// returns `(∂T/∂θ)ᵀ v` for each named parameter. If the iteration does not
/// reach `tol` in `max_iter` steps the last `v` is used and the result is
/// flagged as truncated.
pub fn deq_backward(
    map: &dyn FixedPointMap,
    xbar: &Tensor,
    upstream: &Tensor,
    tol: f64,
    max_iter: usize,
) -> Result<(IndexMap<String, Tensor>, ImplicitInfo)> {
    let mut tape = Tape::new();
    let x = tape.leaf(xbar.clone(), true);
    let t = map.record(&mut tape, x)?;
    let mut v = upstream.clone();
    let mut info = ImplicitInfo {
        truncated: true,
        ..Default::default()
    };
    for k in 0..max_iter {
        let jv = tape
            .vjp(t, v.clone())?
            .get(x)
            .cloned()
            .ok_or_else(|| Error::Tape("fixed-point map does not depend on its input".into()))?;
        let next = jv.add(upstream)?;
        check_finite(&next, "implicit backward", k + 1)?;
        let r = relative_change(&next, &v)?;
        v = next;
        info.iterations = k + 1;
        info.rel_change = r;
        if r < tol {
            info.truncated = false;
            break;
        }
    }
    if info.truncated {
        warn!(
            "implicit backward stopped after {} iterations (relative change {:e})",
            info.iterations, info.rel_change
        );
    }
    let grads = tape.vjp(t, v)?.named();
    Ok((grads, info))
}

/// Name under which differentiable measurements are registered by [`PnpMap`].
pub const MEASUREMENTS: &str = "@measurements";

/// The PnP iteration map at fixed measurements, for implicit differentiation.
/// With `y_trainable` the measurements are registered as a parameter named
/// [`MEASUREMENTS`] so their gradient is returned too.
pub struct PnpMap {
    op: Arc<dyn LinearOperator>,
    net: Network,
    gamma: f64,
    y: Tensor,
    y_trainable: bool,
}

impl PnpMap {
    pub fn new(op: Arc<dyn LinearOperator>, net: Network, gamma: f64, y: Tensor) -> Self {
        PnpMap {
            op,
            net,
            gamma,
            y,
            y_trainable: false,
        }
    }

    pub fn with_measurement_grad(mut self) -> Self {
        self.y_trainable = true;
        self
    }
}

impl FixedPointMap for PnpMap {
    fn record(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let params = self.net.register(tape, true)?;
        let y = if self.y_trainable {
            tape.param(MEASUREMENTS, self.y.clone())?
        } else {
            tape.constant(self.y.clone())
        };
        PnpProblem::new(self.op.clone(), &self.net, self.gamma).record_step(tape, &params, x, y)
    }
}

struct DeqNode {
    map: PnpMap,
    names: Vec<String>,
    tol: f64,
    max_iter: usize,
    info: Arc<Mutex<Option<ImplicitInfo>>>,
}

impl CustomOp for DeqNode {
    fn name(&self) -> &str {
        "deq"
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (grads, info) = deq_backward(&self.map, output, grad_out, self.tol, self.max_iter)?;
        *self.info.lock().expect("info lock") = Some(info);
        Ok(self.names.iter().map(|n| grads.get(n).cloned()).collect())
    }
}

/// Handle to the adjoint-solve status of a recorded DEQ node; filled in
/// when the tape's backward pass reaches the node.
#[derive(Debug, Clone, Default)]
pub struct DeqBackwardStatus(Arc<Mutex<Option<ImplicitInfo>>>);

impl DeqBackwardStatus {
    pub fn get(&self) -> Option<ImplicitInfo> {
        self.0.lock().expect("info lock").clone()
    }
}

/// Solve the fixed point forward (no recording) and put `x̄` on the tape as
/// a node whose backward rule is the implicit gradient with respect to the
/// network parameters and, if `y` requires a gradient, the measurements.
pub fn record_deq(
    tape: &mut Tape,
    problem: &PnpProblem<'_>,
    params: &ParamVars,
    y: Var,
    config: &SolverConfig,
) -> Result<(Var, SolveTrace, DeqBackwardStatus)> {
    let yt = tape.value(y)?.clone();
    let x0 = problem.init(&yt)?;
    let (xbar, trace) = solve_fixed_point(&x0, |x| problem.step(x, &yt), config.tol, config.max_iter)?;
    let mut names = vec![];
    let mut inputs = vec![];
    for (name, var) in params.iter() {
        names.push(name.to_string());
        inputs.push(var);
    }
    let mut map = PnpMap::new(problem.op.clone(), problem.net.clone(), problem.gamma, yt);
    if tape.requires_grad(y)? {
        map = map.with_measurement_grad();
        names.push(MEASUREMENTS.to_string());
        inputs.push(y);
    }
    let status = DeqBackwardStatus::default();
    let node = DeqNode {
        map,
        names,
        tol: config.backward_tol,
        max_iter: config.backward_max_iter,
        info: status.0.clone(),
    };
    let var = tape.custom(inputs, xbar, Box::new(node))?;
    Ok((var, trace, status))
}

/// Reconstruction on the tape: the unrolled network for
/// [`SolverMode::Unrolled`], the implicit fixed-point node otherwise.
pub fn record_reconstruction(
    tape: &mut Tape,
    problem: &PnpProblem<'_>,
    params: &ParamVars,
    y: Var,
    config: &SolverConfig,
) -> Result<Var> {
    match config.mode {
        SolverMode::Unrolled => problem.record_unrolled(tape, params, y, config.unroll_depth),
        SolverMode::Pnp | SolverMode::Deq => Ok(record_deq(tape, problem, params, y, config)?.0),
    }
}

/// Unified entry point over the three engines.
pub fn reconstruct(
    y: &Tensor,
    op: &Arc<dyn LinearOperator>,
    net: &Network,
    config: &SolverConfig,
) -> Result<(Tensor, SolveTrace)> {
    config.validate()?;
    let p = PnpProblem::new(op.clone(), net, config.gamma);
    let x0 = p.init(y)?;
    match config.mode {
        SolverMode::Pnp | SolverMode::Deq => solve_fixed_point(&x0, |x| p.step(x, y), config.tol, config.max_iter),
        SolverMode::Unrolled => {
            let start = Instant::now();
            let mut trace = SolveTrace::default();
            let mut x = x0;
            for _ in 0..config.unroll_depth {
                let next = p.step(&x, y)?;
                trace.rel_changes.push(relative_change(&next, &x)?);
                trace.times.push(start.elapsed().as_secs_f64());
                x = next;
            }
            trace.converged = trace.rel_changes.last().is_none_or(|&r| r < config.tol);
            Ok((x, trace))
        }
    }
}
