//! Central-difference gradient checks shared by the test targets.

#![allow(dead_code)]

use std::sync::Arc;

use mbdl_prune::autodiff::{CustomOp, Tape, Var};
use mbdl_prune::finetune::{
    loss_school, loss_self_supervised, loss_supervised, teacher_outputs, LossContext, LossKind, StrategyKind,
};
use mbdl_prune::model::{build_residual_cnn, Network, Parameter};
use mbdl_prune::physics::{
    gaussian_kernel, make_cartesian_mask, CoilMaps, IdentityOperator, LinearOperator, MriOperator, SrOperator,
};
use mbdl_prune::solvers::{PnpProblem, SolverConfig, SolverMode};
use mbdl_prune::{DType, Mode, Result, Tensor};

pub const H: f64 = 1e-5;

pub type Graph = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Loss = mse(f(inputs), target) with a fixed random target.
pub fn loss_value(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>, target_seed: u64) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let o = tape.value(out).unwrap();
    let target = Tensor::randn(o.shape(), o.dtype(), 1.0, target_seed);
    let t = tape.constant(target);
    let loss = tape.mse_loss(out, t).unwrap();
    let value = tape.value(loss).unwrap().data()[0];
    let grads = tape.backward(loss).unwrap();
    let g = vars.iter().map(|&v| grads.get(v).unwrap().clone()).collect();
    (value, g)
}

/// Worst relative error `‖g − g_fd‖ / ‖g_fd‖` over the inputs.
pub fn grad_error(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let (_, analytic) = loss_value(inputs, f, 99);
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let mut numeric = Tensor::zeros_like(x);
        for i in 0..x.data().len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let (lp, _) = loss_value(&plus, f, 99);
            let (lm, _) = loss_value(&minus, f, 99);
            numeric.data_mut()[i] = (lp - lm) / (2.0 * H);
        }
        worst = worst.max(analytic[k].sub(&numeric).unwrap().norm() / numeric.norm().max(1e-8));
    }
    worst
}

pub fn real(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, DType::Real, 1.0, seed)
}

pub fn complex(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, DType::Complex, 1.0, seed)
}

/// Values bounded away from zero, for kinked primitives.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    real(shape, seed).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub graph: Graph,
}

fn case(name: impl Into<String>, inputs: Vec<Tensor>, graph: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name: name.into(),
        inputs,
        graph: Box::new(graph),
    }
}

/// y = x^3, elementwise.
pub struct Cube;

impl CustomOp for Cube {
    fn name(&self) -> &str {
        "cube"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let d = inputs[0].zip_map(grad_out, "cube", |x, g| 3.0 * x * x * g)?;
        Ok(vec![Some(d)])
    }
}

/// One or more cases for every tape primitive.
pub fn primitive_cases() -> Vec<Case> {
    let mut cases = vec![];
    for (stride, padding) in [(1, 1), (2, 1), (1, 0)] {
        cases.push(case(
            format!("conv2d s{stride} p{padding}"),
            vec![real(&[2, 2, 5, 5], 1), real(&[3, 2, 3, 3], 2), real(&[3], 3)],
            move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, padding),
        ));
    }
    cases.push(case("conv2d no bias", vec![real(&[1, 1, 4, 4], 4), real(&[2, 1, 3, 3], 5)], |t, v| {
        t.conv2d(v[0], v[1], None, 1, 1)
    }));

    let rm = Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap();
    let rv = Tensor::new(&[3], vec![1.5, 0.7, 2.0]).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        let (rm, rv) = (rm.clone(), rv.clone());
        cases.push(case(
            format!("batch_norm {mode:?}"),
            vec![real(&[2, 3, 3, 3], 6), real(&[3], 7), real(&[3], 8)],
            move |t, v| Ok(t.batch_norm(v[0], v[1], v[2], &rm, &rv, mode, 0.1, 1e-5)?.0),
        ));
    }

    let (a, b) = (real(&[2, 3, 4], 10), real(&[2, 3, 4], 11));
    cases.push(case("relu", vec![away_from_zero(&[2, 3, 4], 12)], |t, v| t.relu(v[0])));
    cases.push(case("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])));
    cases.push(case("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])));
    cases.push(case("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])));
    cases.push(case("scale", vec![a.clone()], |t, v| t.scale(v[0], -1.7)));
    cases.push(case("sum", vec![a.clone()], |t, v| t.sum(v[0])));
    cases.push(case("l1_norm", vec![away_from_zero(&[2, 3, 4], 13)], |t, v| t.l1_norm(v[0])));
    cases.push(case("complex add", vec![complex(&[2, 3], 14), complex(&[2, 3], 15)], |t, v| t.add(v[0], v[1])));
    cases.push(case("complex scale", vec![complex(&[2, 3], 16)], |t, v| t.scale(v[0], 0.3)));

    cases.push(case("mse real", vec![real(&[3, 4], 20), real(&[3, 4], 21)], |t, v| t.mse_loss(v[0], v[1])));
    cases.push(case("mse complex", vec![complex(&[3, 4], 22), complex(&[3, 4], 23)], |t, v| {
        t.mse_loss(v[0], v[1])
    }));

    cases.push(case("fft2", vec![complex(&[2, 4, 6], 30)], |t, v| t.fft2(v[0])));
    cases.push(case("ifft2", vec![complex(&[1, 5, 4], 31)], |t, v| t.ifft2(v[0])));

    for k in 0..4 {
        cases.push(case(format!("rotate90 k={k}"), vec![real(&[2, 1, 4, 4], 40 + k as u64)], move |t, v| {
            t.rotate90(v[0], k)
        }));
    }
    cases.push(case("rotate90 rectangular", vec![real(&[1, 1, 3, 5], 45)], |t, v| t.rotate90(v[0], 2)));
    cases.push(case("rotate90_each", vec![real(&[3, 2, 4, 4], 46)], |t, v| t.rotate90_each(v[0], &[1, 2, 3])));
    cases.push(case("rotate90 complex", vec![complex(&[2, 3, 3], 47)], |t, v| t.rotate90(v[0], 3)));
    cases.push(case("complex_to_channels", vec![complex(&[2, 3, 3], 48)], |t, v| t.complex_to_channels(v[0])));
    cases.push(case("channels_to_complex", vec![real(&[2, 2, 3, 3], 49)], |t, v| t.channels_to_complex(v[0])));

    let maps = CoilMaps::synthetic(2, 6, 6, 3).unwrap();
    let mask = make_cartesian_mask(6, 0.5, 0.2, 1).unwrap();
    let mri: Arc<dyn LinearOperator> = Arc::new(MriOperator::new(maps, mask).unwrap());
    let op = mri.clone();
    cases.push(case("apply_op mri", vec![complex(&[2, 6, 6], 50)], move |t, v| t.apply_op(&op, v[0])));
    let op = mri;
    cases.push(case("apply_adjoint mri", vec![complex(&[1, 2, 6, 6], 51)], move |t, v| {
        t.apply_adjoint(&op, v[0])
    }));
    let k = gaussian_kernel(3, 0.8, 1.0, 0.0).unwrap();
    let sr: Arc<dyn LinearOperator> = Arc::new(SrOperator::new(k, 2, 1, 6, 6).unwrap());
    let op = sr.clone();
    cases.push(case("apply_op sr", vec![real(&[2, 1, 6, 6], 52)], move |t, v| t.apply_op(&op, v[0])));
    let op = sr;
    cases.push(case("apply_adjoint sr", vec![real(&[1, 1, 3, 3], 53)], move |t, v| t.apply_adjoint(&op, v[0])));

    cases.push(case("custom", vec![real(&[5], 60)], |t, v| {
        let y = t.value(v[0])?.map(|x| x * x * x);
        t.custom(vec![v[0]], y, Box::new(Cube))
    }));

    // conv -> bn -> scale -> conv with a residual add, as in the denoiser
    let rm = Tensor::zeros(&[3]);
    let rv = Tensor::ones(&[3]);
    cases.push(case(
        "composite",
        vec![
            real(&[2, 1, 4, 4], 70),
            real(&[3, 1, 3, 3], 71),
            real(&[3], 72),
            real(&[3], 73),
            real(&[1, 3, 3, 3], 74),
        ],
        move |t, v| {
            let h = t.conv2d(v[0], v[1], None, 1, 1)?;
            let (h, _) = t.batch_norm(h, v[2], v[3], &rm, &rv, Mode::Train, 0.1, 1e-5)?;
            let h = t.scale(h, 0.5)?;
            let h = t.conv2d(h, v[4], None, 1, 1)?;
            t.add(h, v[0])
        },
    ));
    cases
}

pub fn unrolled(depth: usize, gamma: f64) -> SolverConfig {
    SolverConfig {
        mode: SolverMode::Unrolled,
        unroll_depth: depth,
        gamma,
        ..SolverConfig::default()
    }
}

pub fn identity_net(ch: usize) -> Network {
    let mut net = build_residual_cnn(3, 1, ch, ch, 0).unwrap();
    for p in net.params_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    net
}

pub fn scaled_net(c: usize, ch: usize, seed: u64, s: f64) -> Network {
    let mut net = build_residual_cnn(c, 1, ch, ch, seed).unwrap();
    for p in net.params_mut() {
        if p.name.ends_with(".weight") {
            p.value = p.value.scale(s);
        }
    }
    net
}

pub fn small_mri(n: usize, seed: u64) -> Arc<dyn LinearOperator> {
    let maps = CoilMaps::synthetic(2, n, n, seed).unwrap();
    Arc::new(MriOperator::new(maps, make_cartesian_mask(n, 0.5, 0.25, seed).unwrap()).unwrap())
}

pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().norm_sq() / a.data().len() as f64 * a.dtype().width() as f64
}

pub fn value(tape: &Tape, v: mbdl_prune::autodiff::Var) -> f64 {
    tape.value(v).unwrap().data()[0]
}


pub fn fd_check(net: &Network, loss: &dyn Fn(&Network, bool) -> (f64, Option<Vec<Parameter>>)) -> f64 {
    let (_, grads) = loss(net, true);
    let grads = grads.unwrap();
    // small step: the ReLUs sit close to their kinks on this net
    let h = 1e-6;
    let (mut diff, mut norm) = (0.0, 0.0);
    for (p, g) in net.params().iter().zip(&grads) {
        for i in 0..p.value.numel() {
            let mut plus = net.clone();
            plus.param_mut(&p.name).unwrap().data_mut()[i] += h;
            let mut minus = net.clone();
            minus.param_mut(&p.name).unwrap().data_mut()[i] -= h;
            let n = (loss(&plus, false).0 - loss(&minus, false).0) / (2.0 * h);
            let a = g.grad.as_ref().unwrap().data()[i];
            diff += (a - n).powi(2);
            norm += n * n;
        }
    }
    (diff / norm).sqrt()
}

pub fn strategy_gradient_error(
    op: &Arc<dyn LinearOperator>,
    cfg: &SolverConfig,
    x: &Tensor,
    teacher: &Network,
    net: &Network,
    kind: StrategyKind,
) -> f64 {
    let y = op.forward(x).unwrap();
    let t = teacher_outputs(teacher, op, &y, cfg).unwrap();
    let loss = |n: &Network, grad: bool| {
        let mut tape = Tape::new();
        let params = n.register(&mut tape, true).unwrap();
        let ctx = LossContext {
            problem: PnpProblem::new(op.clone(), n, cfg.gamma),
            params: &params,
            solver: cfg,
            loss: LossKind::Mse,
        };
        let l = match kind {
            StrategyKind::Supervised => loss_supervised(&mut tape, &ctx, &y, x).unwrap(),
            StrategyKind::School => loss_school(&mut tape, &ctx, &y, &t).unwrap(),
            StrategyKind::SelfSupervised => loss_self_supervised(&mut tape, &ctx, &y, &[1, 3]).unwrap().total,
        };
        let v = value(&tape, l);
        let grads = grad.then(|| {
            let g = tape.backward(l).unwrap();
            n.params()
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.clone(),
                    grad: g.by_name(&p.name).cloned(),
                })
                .collect()
        });
        (v, grads)
    };
    fd_check(net, &loss)
}

pub const STRATEGIES: [StrategyKind; 3] = [StrategyKind::Supervised, StrategyKind::School, StrategyKind::SelfSupervised];

/// Relative FD error of each strategy loss through an unrolled MRI reconstructor.
pub fn unrolled_strategy_errors() -> Vec<(StrategyKind, f64)> {
    let op = small_mri(8, 3);
    let x = Tensor::randn(&[2, 8, 8], DType::Complex, 0.5, 6);
    let teacher = scaled_net(4, 2, 9, 0.5);
    let net = scaled_net(3, 2, 11, 0.5);
    STRATEGIES
        .iter()
        .map(|&k| (k, strategy_gradient_error(&op, &unrolled(2, 0.8), &x, &teacher, &net, k)))
        .collect()
}

/// Same through the equilibrium solver and its implicit backward pass.
/// Denoising keeps the untrained map contractive, so the fixed point exists.
pub fn equilibrium_strategy_errors() -> Vec<(StrategyKind, f64)> {
    let op: Arc<dyn LinearOperator> = Arc::new(IdentityOperator::new(&[2, 5, 5], DType::Real));
    let x = Tensor::randn(&[2, 2, 5, 5], DType::Real, 0.5, 6);
    let teacher = scaled_net(4, 2, 9, 0.3);
    let net = scaled_net(3, 2, 11, 0.3);
    let cfg = SolverConfig {
        mode: SolverMode::Deq,
        gamma: 0.5,
        tol: 1e-14,
        max_iter: 500,
        backward_tol: 1e-14,
        backward_max_iter: 500,
        ..SolverConfig::default()
    };
    STRATEGIES
        .iter()
        .map(|&k| (k, strategy_gradient_error(&op, &cfg, &x, &teacher, &net, k)))
        .collect()
}
