//! Recovering accuracy after pruning: supervised, teacher-student ("school")
//! and self-supervised fine-tuning, driven by Adam.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::model::{Network, ParamVars, Parameter};
use crate::physics::LinearOperator;
use crate::solvers::{reconstruct, record_reconstruction, PnpProblem, SolverConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    Supervised,
    School,
    SelfSupervised,
}

impl StrategyKind {
    pub fn tag(self) -> &'static str {
        match self {
            StrategyKind::Supervised => "sv",
            StrategyKind::School => "sc",
            StrategyKind::SelfSupervised => "ss",
        }
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sv" | "supervised" => Ok(StrategyKind::Supervised),
            "sc" | "school" => Ok(StrategyKind::School),
            "ss" | "self_supervised" => Ok(StrategyKind::SelfSupervised),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    L1,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "l1" => Ok(LossKind::L1),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneStrategy {
    pub kind: StrategyKind,
    /// Rotations by multiples of 90° used by the equivariance term.
    pub transforms: Vec<usize>,
    pub loss: LossKind,
}

impl FinetuneStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        FinetuneStrategy {
            kind,
            transforms: vec![1, 2, 3],
            loss: LossKind::Mse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == StrategyKind::SelfSupervised && self.transforms.is_empty() {
            return Err(Error::Config("self-supervised fine-tuning needs a non-empty transform set".into()));
        }
        Ok(())
    }
}

/// `Σ_i ℓ(a_i, b_i)` over the leading batch axis, with ℓ the per-sample mean
/// of squared (or absolute) differences.
pub fn per_sample_loss_sum(tape: &mut Tape, a: Var, b: Var, kind: LossKind) -> Result<Var> {
    let shape = tape.value(a)?.shape().to_vec();
    let batch = *shape
        .first()
        .ok_or_else(|| Error::invalid("loss", "expected a leading batch axis"))?;
    let per_sample = shape[1..].iter().product::<usize>().max(1);
    match kind {
        LossKind::Mse => {
            let m = tape.mse_loss(a, b)?;
            tape.scale(m, batch as f64)
        }
        LossKind::L1 => {
            let d = tape.sub(a, b)?;
            let n = tape.l1_norm(d)?;
            tape.scale(n, 1.0 / per_sample as f64)
        }
    }
}

/// Network, operator and solver settings shared by every loss.
pub struct LossContext<'a> {
    pub problem: PnpProblem<'a>,
    pub params: &'a ParamVars,
    pub solver: &'a SolverConfig,
    pub loss: LossKind,
}

impl LossContext<'_> {
    fn recon(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        record_reconstruction(tape, &self.problem, self.params, y, self.solver)
    }
}

fn nonempty(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::invalid(op, "empty batch"));
    }
    Ok(())
}

/// Supervised: `Σ ℓ(f(y_i), x_i)`.
pub fn loss_supervised(tape: &mut Tape, ctx: &LossContext<'_>, y: &Tensor, x: &Tensor) -> Result<Var> {
    nonempty("loss_supervised", y)?;
    let yv = tape.constant(y.clone());
    let xhat = ctx.recon(tape, yv)?;
    let target = tape.constant(x.clone());
    per_sample_loss_sum(tape, xhat, target, ctx.loss)
}

/// School: `Σ ℓ(f_pruned(y_j), f_teacher(y_j))` against precomputed
/// teacher reconstructions.
pub fn loss_school(tape: &mut Tape, ctx: &LossContext<'_>, y: &Tensor, teacher_out: &Tensor) -> Result<Var> {
    nonempty("loss_school", y)?;
    let yv = tape.constant(y.clone());
    let xhat = ctx.recon(tape, yv)?;
    if tape.value(xhat)?.shape() != teacher_out.shape() {
        return Err(Error::shape(
            "loss_school",
            format!(
                "student output {:?} vs teacher output {:?}",
                tape.value(xhat)?.shape(),
                teacher_out.shape()
            ),
        ));
    }
    let target = tape.constant(teacher_out.clone());
    per_sample_loss_sum(tape, xhat, target, ctx.loss)
}

/// Frozen teacher reconstructions, one per batch item.
pub fn teacher_outputs(
    teacher: &Network,
    op: &Arc<dyn LinearOperator>,
    y: &Tensor,
    solver: &SolverConfig,
) -> Result<Tensor> {
    Ok(reconstruct(y, op, teacher, solver)?.0)
}

/// Terms of the self-supervised loss, kept separately for inspection.
#[derive(Debug, Clone, Copy)]
pub struct SelfSupervisedTerms {
    pub total: Var,
    pub fidelity: Var,
    pub equivariance: Var,
}

/// Self-supervised: `Σ ℓ(A x̂_j, y_j) + ℓ(f(A φ_j x̂_j), φ_j x̂_j)` with
/// `x̂_j = f(y_j)` and `φ_j` a rotation by `turns[j]` quarter turns.
pub fn loss_self_supervised(
    tape: &mut Tape,
    ctx: &LossContext<'_>,
    y: &Tensor,
    turns: &[usize],
) -> Result<SelfSupervisedTerms> {
    nonempty("loss_self_supervised", y)?;
    if turns.len() != y.shape()[0] {
        return Err(Error::invalid(
            "loss_self_supervised",
            format!("{} transforms for {} samples", turns.len(), y.shape()[0]),
        ));
    }
    let op = ctx.problem.op.clone();
    let yv = tape.constant(y.clone());
    let xhat = ctx.recon(tape, yv)?;
    let axhat = tape.apply_op(&op, xhat)?;
    let fidelity = per_sample_loss_sum(tape, axhat, yv, ctx.loss)?;
    let rotated = tape.rotate90_each(xhat, turns)?;
    let y2 = tape.apply_op(&op, rotated)?;
    let x2 = ctx.recon(tape, y2)?;
    let equivariance = per_sample_loss_sum(tape, x2, rotated, ctx.loss)?;
    let total = tape.add(fidelity, equivariance)?;
    Ok(SelfSupervisedTerms {
        total,
        fidelity,
        equivariance,
    })
}

/// Draw one transform per sample from `set`.
pub fn draw_transforms(set: &[usize], n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if set.is_empty() {
        return Err(Error::invalid("draw_transforms", "empty transform set"));
    }
    Ok((0..n).map(|_| set[rng.gen_range(0..set.len())]).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
}

impl OptimState {
    pub fn new(lr: f64) -> Self {
        OptimState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

impl Default for OptimState {
    fn default() -> Self {
        Self::new(1e-5)
    }
}

/// Bias-corrected Adam update of every parameter that carries a gradient.
pub fn adam_step(params: &mut [Parameter], state: &mut OptimState) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for p in params.iter_mut() {
        let Some(g) = p.grad.as_ref() else { continue };
        if g.shape() != p.value.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("`{}`: gradient {:?} vs value {:?}", p.name, g.shape(), p.value.shape()),
            ));
        }
        let m = state
            .m
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(p.value.shape()));
        let v = state
            .v
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(p.value.shape()));
        if m.shape() != p.value.shape() {
            return Err(Error::shape("adam_step", format!("moment of `{}` has stale shape", p.name)));
        }
        let (b1, b2) = (state.beta1, state.beta2);
        for (((w, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Samples with a leading axis of one each.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub measurements: Vec<Tensor>,
    /// Ground-truth images, needed by supervised fine-tuning and validation.
    pub images: Option<Vec<Tensor>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_psnr: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "loss", "val_psnr", "seconds"])?;
        for e in &self.epochs {
            out.write_record([
                e.epoch.to_string(),
                format!("{:e}", e.loss),
                e.val_psnr.map(|p| format!("{p:.6}")).unwrap_or_default(),
                format!("{:.3}", e.seconds),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub struct FinetuneSetup<'a> {
    pub op: Arc<dyn LinearOperator>,
    pub solver: SolverConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Frozen unpruned model, required by the school strategy.
    pub teacher: Option<&'a Network>,
    /// Held-out samples with ground truth for per-epoch PSNR.
    pub validation: Option<&'a Dataset>,
}

impl<'a> FinetuneSetup<'a> {
    pub fn new(op: Arc<dyn LinearOperator>, solver: SolverConfig) -> Self {
        FinetuneSetup {
            op,
            solver,
            epochs: 20,
            batch_size: 4,
            lr: 1e-5,
            seed: 0,
            teacher: None,
            validation: None,
        }
    }
}

/// Mean PSNR (peak 1) of reconstructions over a dataset with ground truth.
pub fn mean_psnr(net: &Network, op: &Arc<dyn LinearOperator>, solver: &SolverConfig, data: &Dataset) -> Result<f64> {
    let images = data
        .images
        .as_ref()
        .ok_or_else(|| Error::Incompatible("validation set has no ground truth".into()))?;
    let mut total = 0.0;
    for (y, x) in data.measurements.iter().zip(images) {
        let (xhat, _) = reconstruct(y, op, net, solver)?;
        total += psnr(&xhat, x, 1.0)?;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Epoch loop over seeded shuffles of `data`: strategy loss, backward pass,
/// Adam step. Returns the updated copy of `net` and a per-epoch log.
pub fn finetune(
    net: &Network,
    strategy: &FinetuneStrategy,
    data: &Dataset,
    setup: &FinetuneSetup<'_>,
) -> Result<(Network, TrainLog)> {
    strategy.validate()?;
    setup.solver.validate()?;
    if data.is_empty() {
        return Err(Error::Incompatible("no fine-tuning samples".into()));
    }
    if setup.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    match strategy.kind {
        StrategyKind::Supervised if data.images.is_none() => {
            return Err(Error::Incompatible("supervised fine-tuning needs ground truth".into()))
        }
        StrategyKind::School if setup.teacher.is_none() => {
            return Err(Error::Incompatible("school fine-tuning needs a teacher network".into()))
        }
        _ => {}
    }

    let mut net = net.clone();
    let mut state = OptimState::new(setup.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for epoch in 0..setup.epochs {
        // frozen teacher: one pass per epoch serves every batch
        let teacher_cache: Option<Vec<Tensor>> = match (strategy.kind, setup.teacher) {
            (StrategyKind::School, Some(t)) => Some(
                data.measurements
                    .iter()
                    .map(|y| teacher_outputs(t, &setup.op, y, &setup.solver))
                    .collect::<Result<_>>()?,
            ),
            _ => None,
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(setup.batch_size) {
            let y = Tensor::stack_batch(&chunk.iter().map(|&i| data.measurements[i].clone()).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let params = net.register(&mut tape, true)?;
            let ctx = LossContext {
                problem: PnpProblem::new(setup.op.clone(), &net, setup.solver.gamma),
                params: &params,
                solver: &setup.solver,
                loss: strategy.loss,
            };
            let loss = match strategy.kind {
                StrategyKind::Supervised => {
                    let images = data.images.as_ref().expect("checked above");
                    let x = Tensor::stack_batch(&chunk.iter().map(|&i| images[i].clone()).collect::<Vec<_>>())?;
                    loss_supervised(&mut tape, &ctx, &y, &x)?
                }
                StrategyKind::School => {
                    let cache = teacher_cache.as_ref().expect("school has a teacher");
                    let t = Tensor::stack_batch(&chunk.iter().map(|&i| cache[i].clone()).collect::<Vec<_>>())?;
                    loss_school(&mut tape, &ctx, &y, &t)?
                }
                StrategyKind::SelfSupervised => {
                    let turns = draw_transforms(&strategy.transforms, chunk.len(), &mut rng)?;
                    loss_self_supervised(&mut tape, &ctx, &y, &turns)?.total
                }
            };
            let value = tape.value(loss)?.data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence(format!("loss became {value} in epoch {epoch}")));
            }
            epoch_loss += value;
            let grads = tape.backward(loss)?.named();
            drop(ctx);
            for p in net.params_mut() {
                p.grad = grads.get(&p.name).cloned();
            }
            adam_step(net.params_mut(), &mut state)?;
        }
        let val_psnr = match setup.validation {
            Some(v) => Some(mean_psnr(&net, &setup.op, &setup.solver, v)?),
            None => None,
        };
        log.epochs.push(EpochLog {
            epoch,
            loss: epoch_loss / data.len() as f64,
            val_psnr,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    for p in net.params_mut() {
        p.grad = None;
    }
    Ok((net, log))
}
