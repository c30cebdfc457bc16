//! Experiment harness: synthetic phantoms, config parsing, timing and the
//! train → prune → fine-tune → evaluate sweep with CSV output.

use std::f64::consts::PI;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::finetune::{finetune, Dataset, FinetuneSetup, FinetuneStrategy, LossKind, StrategyKind, TrainLog};
use crate::metrics::{psnr, ssim};
use crate::model::{build_residual_cnn, count_flops, io, Network};
use crate::physics::{
    add_awgn, gaussian_kernel, make_cartesian_mask, motion_kernel, CoilMaps, KernelKind, LinearOperator, MriOperator,
    SrOperator,
};
use crate::prune::{prune_network, PruneReport};
use crate::solvers::{default_gamma, reconstruct, SolveTrace, SolverConfig, SolverMode};
use crate::tensor::{DType, Tensor};

/// Width of each seed's block of phantom seeds; train, fine-tune and
/// evaluation splits take disjoint sub-ranges of it.
const SPLIT_STRIDE: u64 = 1_000_000;
const SPLIT_OFFSET: u64 = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    /// `[H, W]` real image with values in `[0, 1]`.
    pub image: Tensor,
    pub descriptor: String,
    pub seed: u64,
}

impl Phantom {
    /// Same magnitude with a smooth linear phase ramp drawn from `seed`.
    pub fn with_phase(&self, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, q) = (rng.gen_range(-0.5..0.5) * PI, rng.gen_range(-0.5..0.5) * PI);
        let n = self.image.shape()[0];
        let mut out = Tensor::zeros_like_dtype(self.image.shape(), DType::Complex);
        for r in 0..n {
            for c in 0..n {
                let (u, v) = (coord(c, n), coord(r, n));
                let m = self.image.data()[r * n + c];
                let phi = p * u + q * v;
                out.data_mut()[2 * (r * n + c)] = m * phi.cos();
                out.data_mut()[2 * (r * n + c) + 1] = m * phi.sin();
            }
        }
        out
    }
}

fn coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

enum Region {
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, theta: f64 },
    /// Counter-clockwise convex polygon.
    Polygon(Vec<(f64, f64)>),
}

impl Region {
    fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            Region::Ellipse { cx, cy, a, b, theta } => {
                let (du, dv) = (u - cx, v - cy);
                let (s, c) = theta.sin_cos();
                let (x, y) = (c * du + s * dv, -s * du + c * dv);
                (x / a).powi(2) + (y / b).powi(2) <= 1.0
            }
            Region::Polygon(pts) => (0..pts.len()).all(|i| {
                let (x0, y0) = pts[i];
                let (x1, y1) = pts[(i + 1) % pts.len()];
                (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= 0.0
            }),
        }
    }
}

struct Shape {
    region: Region,
    level: f64,
    slope: (f64, f64),
    centre: (f64, f64),
}

/// Piecewise-smooth composite of a body ellipse and `complexity` random
/// ellipses and convex polygons, each with a gentle intensity ramp.
pub fn synth_phantom(size: usize, complexity: usize, seed: u64) -> Result<Phantom> {
    if size < 16 {
        return Err(Error::invalid("synth_phantom", format!("size must be at least 16, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes = vec![Shape {
        region: Region::Ellipse {
            cx: rng.gen_range(-0.05..0.05),
            cy: rng.gen_range(-0.05..0.05),
            a: rng.gen_range(0.75..0.92),
            b: rng.gen_range(0.65..0.9),
            theta: rng.gen_range(-0.3..0.3),
        },
        level: rng.gen_range(0.25..0.45),
        slope: (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
        centre: (0.0, 0.0),
    }];
    for _ in 0..complexity {
        let (cx, cy) = (rng.gen_range(-0.55..0.55), rng.gen_range(-0.55..0.55));
        let region = if rng.gen_bool(0.6) {
            Region::Ellipse {
                cx,
                cy,
                a: rng.gen_range(0.08..0.35),
                b: rng.gen_range(0.08..0.35),
                theta: rng.gen_range(0.0..PI),
            }
        } else {
            let k = rng.gen_range(3..=5);
            let r = rng.gen_range(0.12..0.35);
            let mut angles: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            angles.sort_by(f64::total_cmp);
            Region::Polygon(angles.iter().map(|t| (cx + r * t.cos(), cy + r * t.sin())).collect())
        };
        shapes.push(Shape {
            region,
            level: rng.gen_range(0.05..0.95),
            slope: (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)),
            centre: (cx, cy),
        });
    }
    let mut img = vec![0.0; size * size];
    for (r, row) in img.chunks_mut(size).enumerate() {
        let v = coord(r, size);
        for (c, px) in row.iter_mut().enumerate() {
            let u = coord(c, size);
            for s in &shapes {
                if s.region.contains(u, v) {
                    *px = s.level + s.slope.0 * (u - s.centre.0) + s.slope.1 * (v - s.centre.1);
                }
            }
            *px = px.clamp(0.0, 1.0);
        }
    }
    Ok(Phantom {
        image: Tensor::new(&[size, size], img)?,
        descriptor: format!("phantom(size={size}, shapes={}, seed={seed})", shapes.len()),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Wall-clock reconstruction time over `reps` runs after `warmup` discarded runs.
pub fn time_inference(
    net: &Network,
    op: &Arc<dyn LinearOperator>,
    solver: &SolverConfig,
    input: &Tensor,
    reps: usize,
    warmup: usize,
) -> Result<Timing> {
    if reps < 3 {
        return Err(Error::invalid("time_inference", format!("need at least 3 repetitions, got {reps}")));
    }
    for _ in 0..warmup {
        reconstruct(input, op, net, solver)?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        reconstruct(input, op, net, solver)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = samples.iter().sum::<f64>() / reps as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    Ok(Timing {
        mean_ms: mean,
        std_ms: var.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Problem {
    Mri,
    Sr,
}

impl FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mri" => Ok(Problem::Mri),
            "sr" => Ok(Problem::Sr),
            other => Err(Error::Config(format!("unknown problem `{other}` (expected mri or sr)"))),
        }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Problem::Mri => "mri",
            Problem::Sr => "sr",
        })
    }
}

/// Everything one sweep needs. Text form is `key = value` per line with `#`
/// comments; lists are comma separated.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub image_size: usize,
    /// Phantom shapes on top of the body ellipse.
    pub complexity: usize,
    pub coils: usize,
    pub sampling_rate: f64,
    pub acs_fraction: f64,
    pub sr_factor: usize,
    pub kernel: KernelKind,
    pub kernel_size: usize,
    /// Gaussian width or motion length, in pixels.
    pub kernel_width: f64,
    pub noise_sigma: f64,
    pub channels: usize,
    pub blocks: usize,
    /// `gamma = auto` stores `None` and resolves to `1/‖A‖²` per operator.
    pub gamma: Option<f64>,
    pub solver: SolverConfig,
    pub ratios: Vec<f64>,
    pub strategies: Vec<StrategyKind>,
    pub loss: LossKind,
    pub transforms: Vec<usize>,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Per-strategy overrides of `lr`, indexed sv, sc, ss.
    pub strategy_lr: [Option<f64>; 3],
    pub batch_size: usize,
    pub train_size: usize,
    pub finetune_size: usize,
    pub eval_size: usize,
    pub seeds: Vec<u64>,
    pub timing_reps: usize,
    pub timing_warmup: usize,
    /// Ratios at which from-scratch baselines are trained, one per entry of
    /// `baseline_strategies`.
    pub baseline_ratios: Vec<f64>,
    pub baseline_strategies: Vec<StrategyKind>,
    pub save_weights: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            problem: Problem::Mri,
            image_size: 64,
            complexity: 6,
            coils: 4,
            sampling_rate: 1.0 / 6.0,
            acs_fraction: 0.08,
            sr_factor: 2,
            kernel: KernelKind::Gaussian,
            kernel_size: 7,
            kernel_width: 1.2,
            noise_sigma: 0.0,
            channels: 16,
            blocks: 1,
            gamma: None,
            solver: SolverConfig {
                mode: SolverMode::Unrolled,
                unroll_depth: 3,
                ..SolverConfig::default()
            },
            ratios: vec![0.05, 0.1, 0.2, 0.4],
            strategies: vec![StrategyKind::Supervised, StrategyKind::School, StrategyKind::SelfSupervised],
            loss: LossKind::Mse,
            transforms: vec![1, 2, 3],
            train_epochs: 60,
            train_lr: 1e-3,
            epochs: 20,
            lr: 2e-4,
            strategy_lr: [None; 3],
            batch_size: 4,
            train_size: 16,
            finetune_size: 8,
            eval_size: 8,
            seeds: vec![0, 1, 2],
            timing_reps: 3,
            timing_warmup: 1,
            baseline_ratios: vec![],
            baseline_strategies: vec![StrategyKind::SelfSupervised],
            save_weights: false,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_strategies(key: &str, value: &str) -> Result<Vec<StrategyKind>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("`{key}`: unknown strategy `{s}`"))))
        .collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "problem" => self.problem = v.parse()?,
            "image_size" => self.image_size = parse_value(key, v)?,
            "complexity" => self.complexity = parse_value(key, v)?,
            "coils" => self.coils = parse_value(key, v)?,
            "sampling_rate" => self.sampling_rate = parse_value(key, v)?,
            "acs_fraction" => self.acs_fraction = parse_value(key, v)?,
            "sr_factor" => self.sr_factor = parse_value(key, v)?,
            "kernel" => {
                self.kernel = KernelKind::parse(v).ok_or_else(|| Error::Config(format!("unknown kernel `{v}`")))?
            }
            "kernel_size" => self.kernel_size = parse_value(key, v)?,
            "kernel_width" => self.kernel_width = parse_value(key, v)?,
            "noise_sigma" => self.noise_sigma = parse_value(key, v)?,
            "channels" => self.channels = parse_value(key, v)?,
            "blocks" => self.blocks = parse_value(key, v)?,
            "gamma" => self.gamma = if v == "auto" { None } else { Some(parse_value(key, v)?) },
            "solver" => self.solver.mode = v.parse()?,
            "unroll_depth" => self.solver.unroll_depth = parse_value(key, v)?,
            "max_iter" => self.solver.max_iter = parse_value(key, v)?,
            "tol" => self.solver.tol = parse_value(key, v)?,
            "backward_tol" => self.solver.backward_tol = parse_value(key, v)?,
            "backward_max_iter" => self.solver.backward_max_iter = parse_value(key, v)?,
            "ratios" => self.ratios = parse_list(key, v)?,
            "strategies" => self.strategies = parse_strategies(key, v)?,
            "loss" => self.loss = v.parse()?,
            "transforms" => self.transforms = parse_list(key, v)?,
            "train_epochs" => self.train_epochs = parse_value(key, v)?,
            "train_lr" => self.train_lr = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "lr_sv" | "lr_sc" | "lr_ss" => {
                let kind: StrategyKind = key[3..].parse()?;
                self.strategy_lr[lr_slot(kind)] = if v == "auto" { None } else { Some(parse_value(key, v)?) };
            }
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "train_size" => self.train_size = parse_value(key, v)?,
            "finetune_size" => self.finetune_size = parse_value(key, v)?,
            "eval_size" => self.eval_size = parse_value(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "timing_reps" => self.timing_reps = parse_value(key, v)?,
            "timing_warmup" => self.timing_warmup = parse_value(key, v)?,
            "baseline_ratios" => self.baseline_ratios = parse_list(key, v)?,
            "baseline_strategies" => self.baseline_strategies = parse_strategies(key, v)?,
            "save_weights" => self.save_weights = parse_value(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults, then validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        for &r in self.ratios.iter().chain(&self.baseline_ratios) {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("ratio {r} outside [0, 1)"));
            }
        }
        if self.image_size < 16 {
            return bad(format!("image_size must be at least 16, got {}", self.image_size));
        }
        if self.channels == 0 || self.blocks == 0 {
            return bad("channels and blocks must be positive".into());
        }
        if self.train_size == 0 || self.finetune_size == 0 || self.eval_size == 0 {
            return bad("split sizes must be positive".into());
        }
        if [self.train_size, self.finetune_size, self.eval_size]
            .iter()
            .any(|&n| n as u64 >= SPLIT_OFFSET)
        {
            return bad(format!("split sizes must stay below {SPLIT_OFFSET}"));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.timing_reps < 3 {
            return bad("timing_reps must be at least 3".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        if !(self.train_lr > 0.0 && self.lr > 0.0) || self.strategy_lr.iter().flatten().any(|&lr| !(lr > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        if matches!(self.gamma, Some(g) if !(g > 0.0)) {
            return bad("gamma must be positive".into());
        }
        if self.problem == Problem::Sr && (self.sr_factor == 0 || self.image_size % self.sr_factor != 0) {
            return bad(format!("image_size {} is not divisible by sr_factor {}", self.image_size, self.sr_factor));
        }
        FinetuneStrategy {
            kind: StrategyKind::SelfSupervised,
            transforms: self.transforms.clone(),
            loss: self.loss,
        }
        .validate()?;
        self.solver.validate()
    }

    /// Fine-tuning learning rate of `kind`: its override, else `lr`.
    pub fn finetune_lr(&self, kind: StrategyKind) -> f64 {
        self.strategy_lr[lr_slot(kind)].unwrap_or(self.lr)
    }

    /// Network input/output channels for the chosen problem.
    pub fn image_channels(&self) -> usize {
        match self.problem {
            Problem::Mri => 2,
            Problem::Sr => 1,
        }
    }
}

fn lr_slot(kind: StrategyKind) -> usize {
    match kind {
        StrategyKind::Supervised => 0,
        StrategyKind::School => 1,
        StrategyKind::SelfSupervised => 2,
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.solver;
        writeln!(f, "problem = {}", self.problem)?;
        writeln!(f, "image_size = {}", self.image_size)?;
        writeln!(f, "complexity = {}", self.complexity)?;
        writeln!(f, "coils = {}", self.coils)?;
        writeln!(f, "sampling_rate = {}", self.sampling_rate)?;
        writeln!(f, "acs_fraction = {}", self.acs_fraction)?;
        writeln!(f, "sr_factor = {}", self.sr_factor)?;
        writeln!(f, "kernel = {}", self.kernel.name())?;
        writeln!(f, "kernel_size = {}", self.kernel_size)?;
        writeln!(f, "kernel_width = {}", self.kernel_width)?;
        writeln!(f, "noise_sigma = {}", self.noise_sigma)?;
        writeln!(f, "channels = {}", self.channels)?;
        writeln!(f, "blocks = {}", self.blocks)?;
        match self.gamma {
            Some(g) => writeln!(f, "gamma = {g}")?,
            None => writeln!(f, "gamma = auto")?,
        }
        writeln!(f, "solver = {}", s.mode)?;
        writeln!(f, "unroll_depth = {}", s.unroll_depth)?;
        writeln!(f, "max_iter = {}", s.max_iter)?;
        writeln!(f, "tol = {}", s.tol)?;
        writeln!(f, "backward_tol = {}", s.backward_tol)?;
        writeln!(f, "backward_max_iter = {}", s.backward_max_iter)?;
        writeln!(f, "ratios = {}", join(&self.ratios))?;
        writeln!(f, "strategies = {}", join(&self.strategies.iter().map(|k| k.tag()).collect::<Vec<_>>()))?;
        writeln!(
            f,
            "loss = {}",
            match self.loss {
                LossKind::Mse => "mse",
                LossKind::L1 => "l1",
            }
        )?;
        writeln!(f, "transforms = {}", join(&self.transforms))?;
        writeln!(f, "train_epochs = {}", self.train_epochs)?;
        writeln!(f, "train_lr = {}", self.train_lr)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "lr = {}", self.lr)?;
        for kind in [StrategyKind::Supervised, StrategyKind::School, StrategyKind::SelfSupervised] {
            match self.strategy_lr[lr_slot(kind)] {
                Some(lr) => writeln!(f, "lr_{} = {lr}", kind.tag())?,
                None => writeln!(f, "lr_{} = auto", kind.tag())?,
            }
        }
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "train_size = {}", self.train_size)?;
        writeln!(f, "finetune_size = {}", self.finetune_size)?;
        writeln!(f, "eval_size = {}", self.eval_size)?;
        writeln!(f, "seeds = {}", join(&self.seeds))?;
        writeln!(f, "timing_reps = {}", self.timing_reps)?;
        writeln!(f, "timing_warmup = {}", self.timing_warmup)?;
        writeln!(f, "baseline_ratios = {}", join(&self.baseline_ratios))?;
        writeln!(
            f,
            "baseline_strategies = {}",
            join(&self.baseline_strategies.iter().map(|k| k.tag()).collect::<Vec<_>>())
        )?;
        writeln!(f, "save_weights = {}", self.save_weights)?;
        writeln!(f, "out_dir = {}", self.out_dir.display())
    }
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub tag: String,
    pub seed: u64,
    pub nominal_ratio: f64,
    pub achieved_ratio: f64,
    /// `none`, a strategy tag, or `random-<tag>` for from-scratch baselines.
    pub strategy: String,
    pub psnr: f64,
    pub ssim_pct: f64,
    pub params: usize,
    pub flops: u64,
    pub time_ms: f64,
    pub time_std_ms: f64,
    pub speedup: f64,
    pub degradation_pct: f64,
    /// Pruned-and-fine-tuned PSNR minus this row's PSNR (baseline rows only).
    pub delta_db: Option<f64>,
}

pub const METRICS_HEADER: [&str; 14] = [
    "tag",
    "seed",
    "nominal_ratio",
    "achieved_ratio",
    "strategy",
    "psnr_db",
    "ssim_pct",
    "params",
    "flops",
    "time_ms",
    "time_std_ms",
    "speedup",
    "degradation_pct",
    "delta_db",
];

impl MetricsRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.tag.clone(),
            self.seed.to_string(),
            self.nominal_ratio.to_string(),
            format!("{:.6}", self.achieved_ratio),
            self.strategy.clone(),
            format!("{:.9}", self.psnr),
            format!("{:.6}", self.ssim_pct),
            self.params.to_string(),
            self.flops.to_string(),
            format!("{:.4}", self.time_ms),
            format!("{:.4}", self.time_std_ms),
            format!("{:.4}", self.speedup),
            format!("{:.9}", self.degradation_pct),
            self.delta_db.map(|d| format!("{d:.9}")).unwrap_or_default(),
        ]
    }

    pub fn from_record(r: &csv::StringRecord) -> Result<Self> {
        if r.len() != METRICS_HEADER.len() {
            return Err(Error::Format(format!(
                "metrics row has {} fields, expected {}",
                r.len(),
                METRICS_HEADER.len()
            )));
        }
        fn num<T: FromStr>(r: &csv::StringRecord, i: usize) -> Result<T> {
            r[i].parse()
                .map_err(|_| Error::Format(format!("column `{}`: cannot parse `{}`", METRICS_HEADER[i], &r[i])))
        }
        Ok(MetricsRow {
            tag: r[0].to_string(),
            seed: num(r, 1)?,
            nominal_ratio: num(r, 2)?,
            achieved_ratio: num(r, 3)?,
            strategy: r[4].to_string(),
            psnr: num(r, 5)?,
            ssim_pct: num(r, 6)?,
            params: num(r, 7)?,
            flops: num(r, 8)?,
            time_ms: num(r, 9)?,
            time_std_ms: num(r, 10)?,
            speedup: num(r, 11)?,
            degradation_pct: num(r, 12)?,
            delta_db: if r[13].is_empty() { None } else { Some(num(r, 13)?) },
        })
    }
}

/// `100 (p₀ − p) / p₀`.
pub fn degradation_pct(unpruned_psnr: f64, psnr: f64) -> f64 {
    100.0 * (unpruned_psnr - psnr) / unpruned_psnr
}

/// Row-at-a-time CSV writer that flushes after every row, so a failed sweep
/// leaves everything finished so far on disk.
pub struct MetricsWriter {
    out: csv::Writer<BufWriter<File>>,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut out = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        out.write_record(METRICS_HEADER)?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    pub fn push(&mut self, row: &MetricsRow) -> Result<()> {
        self.out.write_record(row.record())?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for r in rows {
        w.push(r)?;
    }
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    let header = rd.headers()?.clone();
    if header.iter().ne(METRICS_HEADER.iter().copied()) {
        return Err(Error::Format("unexpected metrics.csv header".into()));
    }
    rd.records().map(|r| MetricsRow::from_record(&r?)).collect()
}

/// Seed-averaged view of `metrics.csv`, one row per (ratio, strategy).
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub nominal_ratio: f64,
    pub strategy: String,
    pub seeds: usize,
    pub achieved_ratio: f64,
    pub psnr: f64,
    pub ssim_pct: f64,
    pub params: f64,
    pub flops: f64,
    pub time_ms: f64,
    pub speedup: f64,
    pub degradation_pct: f64,
    pub delta_db: Option<f64>,
}

pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(f64, String)> = vec![];
    for r in rows {
        if !keys.iter().any(|(k, s)| *k == r.nominal_ratio && *s == r.strategy) {
            keys.push((r.nominal_ratio, r.strategy.clone()));
        }
    }
    keys.into_iter()
        .map(|(ratio, strategy)| {
            let sel: Vec<&MetricsRow> = rows
                .iter()
                .filter(|r| r.nominal_ratio == ratio && r.strategy == strategy)
                .collect();
            let n = sel.len() as f64;
            let mean = |f: &dyn Fn(&MetricsRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
            let deltas: Vec<f64> = sel.iter().filter_map(|r| r.delta_db).collect();
            SummaryRow {
                nominal_ratio: ratio,
                strategy,
                seeds: sel.len(),
                achieved_ratio: mean(&|r| r.achieved_ratio),
                psnr: mean(&|r| r.psnr),
                ssim_pct: mean(&|r| r.ssim_pct),
                params: mean(&|r| r.params as f64),
                flops: mean(&|r| r.flops as f64),
                time_ms: mean(&|r| r.time_ms),
                speedup: mean(&|r| r.speedup),
                degradation_pct: mean(&|r| r.degradation_pct),
                delta_db: (!deltas.is_empty()).then(|| deltas.iter().sum::<f64>() / deltas.len() as f64),
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "nominal_ratio",
        "strategy",
        "seeds",
        "achieved_ratio",
        "psnr_db",
        "ssim_pct",
        "params",
        "flops",
        "time_ms",
        "speedup",
        "degradation_pct",
        "delta_db",
    ])?;
    for r in rows {
        out.write_record([
            r.nominal_ratio.to_string(),
            r.strategy.clone(),
            r.seeds.to_string(),
            format!("{:.6}", r.achieved_ratio),
            format!("{:.6}", r.psnr),
            format!("{:.4}", r.ssim_pct),
            format!("{:.1}", r.params),
            format!("{:.1}", r.flops),
            format!("{:.4}", r.time_ms),
            format!("{:.4}", r.speedup),
            format!("{:.6}", r.degradation_pct),
            r.delta_db.map(|d| format!("{d:.6}")).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Measurement operator for one seed; coil maps, masks and kernels are drawn
/// from `seed`.
pub fn build_operator(config: &ExperimentConfig, seed: u64) -> Result<Arc<dyn LinearOperator>> {
    let n = config.image_size;
    Ok(match config.problem {
        Problem::Mri => {
            let maps = CoilMaps::synthetic(config.coils, n, n, seed)?;
            let mask = make_cartesian_mask(n, config.sampling_rate, config.acs_fraction, seed)?;
            Arc::new(MriOperator::new(maps, mask)?)
        }
        Problem::Sr => {
            let kernel = match config.kernel {
                KernelKind::Gaussian => gaussian_kernel(config.kernel_size, config.kernel_width, 1.0, 0.0)?,
                KernelKind::Motion => motion_kernel(config.kernel_size, config.kernel_width, 0.0)?,
                other => {
                    return Err(Error::Config(format!(
                        "kernel `{}` cannot be generated from a config",
                        other.name()
                    )))
                }
            };
            Arc::new(SrOperator::new(kernel, config.sr_factor, 1, n, n)?)
        }
    })
}

/// Ground-truth image with a leading batch axis of one, in the operator's domain.
pub fn ground_truth(config: &ExperimentConfig, phantom_seed: u64) -> Result<Tensor> {
    let n = config.image_size;
    let p = synth_phantom(n, config.complexity, phantom_seed)?;
    match config.problem {
        Problem::Mri => p.with_phase(phantom_seed ^ 0x9e37_79b9).reshape(&[1, n, n]),
        Problem::Sr => p.image.reshape(&[1, 1, n, n]),
    }
}

/// `count` samples with phantom seeds `first..first + count`.
pub fn make_dataset(
    config: &ExperimentConfig,
    op: &Arc<dyn LinearOperator>,
    first: u64,
    count: usize,
) -> Result<Dataset> {
    let mut measurements = Vec::with_capacity(count);
    let mut images = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let x = ground_truth(config, first + i)?;
        let y = add_awgn(&op.forward(&x)?, config.noise_sigma, (first + i).wrapping_mul(31).wrapping_add(7))?;
        measurements.push(y);
        images.push(x);
    }
    Ok(Dataset {
        measurements,
        images: Some(images),
    })
}

/// Operator, resolved solver settings and the three disjoint data splits of
/// one seed.
pub struct SeedData {
    pub seed: u64,
    pub op: Arc<dyn LinearOperator>,
    pub solver: SolverConfig,
    pub train: Dataset,
    pub finetune: Dataset,
    pub eval: Dataset,
}

impl SeedData {
    /// Supervised fine-tuning uses the labelled training split; the other
    /// strategies only see measurements of the fine-tuning split.
    pub fn split_for(&self, kind: StrategyKind) -> &Dataset {
        match kind {
            StrategyKind::Supervised => &self.train,
            StrategyKind::School | StrategyKind::SelfSupervised => &self.finetune,
        }
    }
}

pub fn prepare_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let op = build_operator(config, seed)?;
    let mut solver = config.solver.clone();
    solver.gamma = match config.gamma {
        Some(g) => g,
        None => default_gamma(op.as_ref())?,
    };
    let base = seed.wrapping_mul(SPLIT_STRIDE);
    Ok(SeedData {
        seed,
        train: make_dataset(config, &op, base, config.train_size)?,
        finetune: make_dataset(config, &op, base + SPLIT_OFFSET, config.finetune_size)?,
        eval: make_dataset(config, &op, base + 2 * SPLIT_OFFSET, config.eval_size)?,
        op,
        solver,
    })
}

fn setup<'a>(config: &ExperimentConfig, data: &SeedData, epochs: usize, lr: f64, seed: u64) -> FinetuneSetup<'a> {
    let mut s = FinetuneSetup::new(data.op.clone(), data.solver.clone());
    s.epochs = epochs;
    s.lr = lr;
    s.batch_size = config.batch_size;
    s.seed = seed;
    s
}

fn strategy(config: &ExperimentConfig, kind: StrategyKind) -> FinetuneStrategy {
    FinetuneStrategy {
        kind,
        transforms: config.transforms.clone(),
        loss: config.loss,
    }
}

/// Supervised training of the unpruned model on the training split.
/// Zero the last convolution so the residual denoiser starts as the identity
/// and training starts from the data-consistent initial reconstruction.
pub fn zero_tail(net: &mut Network) -> Result<()> {
    for name in ["tail.weight", "tail.bias"] {
        let p = net
            .param_mut(name)
            .ok_or_else(|| Error::Incompatible(format!("network has no `{name}`")))?;
        *p = Tensor::zeros(p.shape());
    }
    Ok(())
}

pub fn train_unpruned(config: &ExperimentConfig, data: &SeedData) -> Result<(Network, TrainLog)> {
    let c = config.image_channels();
    let mut net = build_residual_cnn(config.channels, config.blocks, c, c, data.seed)?;
    zero_tail(&mut net)?;
    let s = setup(config, data, config.train_epochs, config.train_lr, data.seed);
    finetune(&net, &strategy(config, StrategyKind::Supervised), &data.train, &s)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub psnr: f64,
    pub ssim_pct: f64,
    pub params: usize,
    pub flops: u64,
    pub timing: Timing,
    /// Solver trace for the first evaluation image.
    pub trace: SolveTrace,
}

/// Per-image reconstruction of the evaluation split: mean PSNR/SSIM (peak 1),
/// cost counts and timing on the first image.
pub fn evaluate(config: &ExperimentConfig, net: &Network, data: &SeedData) -> Result<Evaluation> {
    let images = data.eval.images.as_ref().expect("synthetic splits carry ground truth");
    let (mut p, mut s) = (0.0, 0.0);
    let mut first_trace = None;
    for (y, x) in data.eval.measurements.iter().zip(images) {
        let (xhat, trace) = reconstruct(y, &data.op, net, &data.solver)?;
        p += psnr(&xhat, x, 1.0)?;
        s += ssim(&xhat, x, 1.0)?;
        first_trace.get_or_insert(trace);
    }
    let n = images.len() as f64;
    let timing = time_inference(
        net,
        &data.op,
        &data.solver,
        &data.eval.measurements[0],
        config.timing_reps,
        config.timing_warmup,
    )?;
    Ok(Evaluation {
        psnr: p / n,
        ssim_pct: 100.0 * s / n,
        params: net.count_params(),
        flops: count_flops(net, config.image_size, config.image_size)?,
        timing,
        trace: first_trace.unwrap_or_default(),
    })
}

fn ratio_tag(r: f64) -> String {
    format!("{}", (r * 100.0).round() as i64)
}

pub fn row_tag(seed: u64, ratio: f64, strategy: &str) -> String {
    format!("s{seed}_r{}_{strategy}", ratio_tag(ratio))
}

struct Baseline {
    psnr: f64,
    time_ms: f64,
    params: usize,
}

fn row(
    tag: String,
    seed: u64,
    ratio: f64,
    achieved: f64,
    strategy: &str,
    e: &Evaluation,
    base: &Baseline,
) -> MetricsRow {
    MetricsRow {
        tag,
        seed,
        nominal_ratio: ratio,
        achieved_ratio: achieved,
        strategy: strategy.to_string(),
        psnr: e.psnr,
        ssim_pct: e.ssim_pct,
        params: e.params,
        flops: e.flops,
        time_ms: e.timing.mean_ms,
        time_std_ms: e.timing.std_ms,
        speedup: base.time_ms / e.timing.mean_ms,
        degradation_pct: degradation_pct(base.psnr, e.psnr),
        delta_db: None,
    }
}

/// Output files of one sweep.
struct Artifacts<'a> {
    dir: &'a Path,
    save_weights: bool,
}

impl Artifacts<'_> {
    fn csv(&self, name: String, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut f = BufWriter::new(File::create(self.dir.join(name))?);
        write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    fn model(&self, tag: &str, net: &Network, eval: &Evaluation, log: Option<&TrainLog>) -> Result<()> {
        self.csv(format!("trace_{tag}.csv"), |f| eval.trace.write_csv(f))?;
        if let Some(log) = log {
            self.csv(format!("train_{tag}.csv"), |f| log.write_csv(f))?;
        }
        if self.save_weights {
            io::save_weights(net, self.dir.join(format!("weights_{tag}.spde")))?;
        }
        Ok(())
    }

    fn prune_report(&self, tag: &str, report: &PruneReport) -> Result<()> {
        self.csv(format!("prune_report_{tag}.csv"), |f| report.write_csv(f))
    }
}

fn staged<T>(stage: impl FnOnce() -> String, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage()))
}

/// Fresh network with `spec`'s exact widths, trained from scratch with the
/// strategy's loss, data split and fine-tuning budget.
pub fn train_from_scratch(
    config: &ExperimentConfig,
    data: &SeedData,
    spec: &crate::model::NetworkSpec,
    kind: StrategyKind,
    teacher: &Network,
) -> Result<(Network, TrainLog)> {
    let init = data.seed.wrapping_add(0x5eed_0000);
    let mut net = Network::new(spec.clone(), init);
    zero_tail(&mut net)?;
    let mut s = setup(config, data, config.epochs, config.finetune_lr(kind), init);
    s.teacher = Some(teacher);
    finetune(&net, &strategy(config, kind), data.split_for(kind), &s)
}

/// Run the full sweep, writing `metrics.csv`, `summary.csv`, per-model traces
/// and training logs, prune reports and optionally weight files to
/// `config.out_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir)?;
    fs::write(config.out_dir.join("config.txt"), config.to_string())?;
    let art = Artifacts {
        dir: &config.out_dir,
        save_weights: config.save_weights,
    };
    let mut writer = MetricsWriter::create(config.out_dir.join("metrics.csv"))?;
    let mut rows = vec![];
    let mut emit = |r: MetricsRow, rows: &mut Vec<MetricsRow>| -> Result<()> {
        info!("{} psnr {:.3} dB degradation {:.3}%", r.tag, r.psnr, r.degradation_pct);
        writer.push(&r)?;
        rows.push(r);
        Ok(())
    };

    for &seed in &config.seeds {
        let data = staged(|| format!("data seed {seed}"), prepare_seed(config, seed))?;
        let (teacher, log) = staged(|| format!("train seed {seed}"), train_unpruned(config, &data))?;
        let tag = row_tag(seed, 0.0, "none");
        let e = staged(|| format!("evaluate {tag}"), evaluate(config, &teacher, &data))?;
        art.model(&tag, &teacher, &e, Some(&log))?;
        let base = Baseline {
            psnr: e.psnr,
            time_ms: e.timing.mean_ms,
            params: e.params,
        };
        emit(row(tag, seed, 0.0, 0.0, "none", &e, &base), &mut rows)?;

        for &ratio in config.ratios.iter().filter(|&&r| r > 0.0) {
            let tag = row_tag(seed, ratio, "none");
            let (pruned, report) = staged(|| format!("prune {tag}"), prune_network(&teacher, ratio))?;
            art.prune_report(&tag, &report)?;
            let achieved = 1.0 - pruned.count_params() as f64 / base.params as f64;
            let e = staged(|| format!("evaluate {tag}"), evaluate(config, &pruned, &data))?;
            art.model(&tag, &pruned, &e, None)?;
            emit(row(tag, seed, ratio, achieved, "none", &e, &base), &mut rows)?;

            let mut tuned_psnr = vec![];
            for &kind in &config.strategies {
                let tag = row_tag(seed, ratio, kind.tag());
                let mut s = setup(config, &data, config.epochs, config.finetune_lr(kind), seed);
                s.teacher = Some(&teacher);
                let (tuned, log) = staged(
                    || format!("finetune {tag}"),
                    finetune(&pruned, &strategy(config, kind), data.split_for(kind), &s),
                )?;
                let e = staged(|| format!("evaluate {tag}"), evaluate(config, &tuned, &data))?;
                art.model(&tag, &tuned, &e, Some(&log))?;
                tuned_psnr.push((kind, e.psnr));
                emit(row(tag, seed, ratio, achieved, kind.tag(), &e, &base), &mut rows)?;
            }

            if !config.baseline_ratios.contains(&ratio) {
                continue;
            }
            for &kind in &config.baseline_strategies {
                let label = format!("random-{}", kind.tag());
                let tag = row_tag(seed, ratio, &label);
                let (fresh, log) = staged(
                    || format!("train {tag}"),
                    train_from_scratch(config, &data, pruned.spec(), kind, &teacher),
                )?;
                let e = staged(|| format!("evaluate {tag}"), evaluate(config, &fresh, &data))?;
                art.model(&tag, &fresh, &e, Some(&log))?;
                let mut r = row(tag, seed, ratio, achieved, &label, &e, &base);
                r.delta_db = tuned_psnr.iter().find(|(k, _)| *k == kind).map(|(_, p)| p - e.psnr);
                emit(r, &mut rows)?;
            }
        }
    }
    let mut f = File::create(config.out_dir.join("summary.csv"))?;
    write_summary(&summarize(&rows), &mut f)?;
    Ok(rows)
}

/// Seed-averaged comparison of pruned-and-fine-tuned against a from-scratch
/// model with the same widths; `delta_db` is the mean PSNR gap.
pub fn random_baseline(config: &ExperimentConfig, ratio: f64, kind: StrategyKind) -> Result<MetricsRow> {
    let mut cfg = config.clone();
    cfg.ratios = vec![ratio];
    cfg.strategies = vec![kind];
    cfg.baseline_ratios = vec![ratio];
    cfg.baseline_strategies = vec![kind];
    let rows = run_experiment(&cfg)?;
    let label = format!("random-{}", kind.tag());
    summarize(&rows)
        .into_iter()
        .find(|s| s.strategy == label)
        .map(|s| MetricsRow {
            tag: format!("mean_r{}_{label}", ratio_tag(ratio)),
            seed: 0,
            nominal_ratio: s.nominal_ratio,
            achieved_ratio: s.achieved_ratio,
            strategy: label.clone(),
            psnr: s.psnr,
            ssim_pct: s.ssim_pct,
            params: s.params.round() as usize,
            flops: s.flops.round() as u64,
            time_ms: s.time_ms,
            time_std_ms: 0.0,
            speedup: s.speedup,
            degradation_pct: s.degradation_pct,
            delta_db: s.delta_db,
        })
        .ok_or_else(|| Error::Incompatible(format!("ratio {ratio} produced no baseline rows")))
}
