//! The numbered acceptance checks, shared by `selftest` and the acceptance
//! test target.

use std::fmt;
use std::time::Instant;

use linattn_bench::{
    analytic_bytes, analytic_ops, fit_scaling_exponent, measured_profile, Dims, Measurement, Mechanism,
    ProfileOptions,
};
use linattn_core::attention::{self, AttentionBlockParams, BlockVars};
use linattn_core::autodiff::gradcheck::{check_graph, CheckOptions};
use linattn_core::metrics::ConfusionMatrix;
use linattn_core::network::data::generate_synthetic_dataset;
use linattn_core::network::train::{smoothed, train_demo, TrainOptions};
use linattn_core::network::{self, checkpoint, Fusion, ManetConfig, ParamVars, ResNeXtBlockConfig};
use linattn_core::tensor::ops;
use linattn_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Check {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {} {:<22} {} ({:.1}s) {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.seconds,
            self.detail
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tolerances {
    pub exactness: f64,
    pub gradient: f64,
    pub metrics: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            exactness: 1e-10,
            gradient: 1e-5,
            metrics: 1e-6,
        }
    }
}

impl Tolerances {
    /// Tolerances no result can meet; used to exercise the failure path.
    pub fn corrupted() -> Self {
        Tolerances {
            exactness: -1.0,
            gradient: -1.0,
            metrics: -1.0,
        }
    }
}

fn timed(id: usize, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        id,
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Worst relative error between the linear and quadratic kernel forms.
/// Sizes are drawn per trial unless `fixed` gives `(N, D_k, D_v)`.
pub fn max_equivalence_error(trials: usize, seed: u64, fixed: Option<(usize, usize, usize)>) -> Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (n, dk, dv) =
            fixed.unwrap_or_else(|| (r.random_range(1..=256), r.random_range(1..=32), r.random_range(1..=64)));
        let scale = r.random_range(0.1..3.0);
        let q = Tensor::<f64>::randn(&[n, dk], scale, &mut r);
        let k = Tensor::<f64>::randn(&[n, dk], scale, &mut r);
        let v = Tensor::<f64>::randn(&[n, dv], 1.0, &mut r);
        let lin = attention::kernel_attention_linear(&q, &k, &v)?;
        let quad = attention::kernel_attention_quadratic(&q, &k, &v)?;
        worst = worst.max(lin.rel_err(&quad));
    }
    Ok(worst)
}

pub fn exactness(tol: &Tolerances) -> Check {
    timed(1, "algebraic exactness", || {
        let worst = max_equivalence_error(100, 0, None)?;
        Ok((worst <= tol.exactness, format!("max rel err {worst:.2e} over 100 instances")))
    })
}

fn in_range(x: f64, lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&x)
}

fn near(x: f64, target: f64, rel: f64) -> bool {
    (x - target).abs() <= rel * target
}

const FIG_DK: usize = 32;
const FIG_DV: usize = 64;

pub fn compute_figures() -> Check {
    timed(2, "compute reproduction", || {
        let d = Dims::new(4096, FIG_DK, FIG_DV);
        let dot = analytic_ops(Mechanism::Dot, d) as f64;
        let ker = analytic_ops(Mechanism::Kernel, d) as f64;
        let ratio = dot / ker;
        let ok = near(dot, 3e9, 0.10) && near(ker, 3.7e7, 0.15) && in_range(ratio, 70.0, 110.0);
        Ok((ok, format!("N=4096 dot {dot:.3e} ops, kernel {ker:.3e} ops, ratio {ratio:.1}")))
    })
}

pub fn memory_figures() -> Check {
    timed(3, "memory reproduction", || {
        let small = Dims::new(4096, FIG_DK, FIG_DV);
        let large = Dims::new(65536, FIG_DK, FIG_DV);
        let dot4k = analytic_bytes(Mechanism::Dot, small) as f64;
        let ker4k = analytic_bytes(Mechanism::Kernel, small) as f64;
        let dot64k = analytic_bytes(Mechanism::Dot, large) as f64;
        let ratio = dot64k / analytic_bytes(Mechanism::Kernel, large) as f64;
        let ok = near(dot4k, 69e6, 0.10)
            && near(dot64k, 17.2e9, 0.05)
            && in_range(ker4k, 3e6 / 2.0, 3e6 * 2.0)
            && in_range(ratio, 200.0, 500.0);
        Ok((
            ok,
            format!(
                "dot {:.1} MB @4096, {:.2} GB @65536; kernel {:.2} MB @4096; ratio @65536 {ratio:.0}",
                dot4k / 1e6,
                dot64k / 1e9,
                ker4k / 1e6
            ),
        ))
    })
}

pub const SCALING_NS: [usize; 5] = [1024, 2048, 4096, 8192, 16384];

/// Measured runtime slopes and the dot peak-memory check at N=4096.
pub fn scaling(opts: &ProfileOptions) -> Check {
    timed(4, "empirical scaling", || {
        let mut slopes = Vec::new();
        let mut skipped = Vec::new();
        let mut dot_peak = None;
        for m in Mechanism::ALL {
            let mut points = Vec::new();
            for &n in &SCALING_NS {
                let d = Dims::new(n, FIG_DK, FIG_DV);
                match measured_profile(m, d, opts)? {
                    Measurement::Done { median_ns, peak_bytes, .. } => {
                        points.push((n as f64, median_ns as f64));
                        if m == Mechanism::Dot && n == 4096 {
                            dot_peak = Some((peak_bytes as f64, analytic_bytes(m, d) as f64));
                        }
                    }
                    Measurement::Skipped(_) => skipped.push(format!("{m}@{n}")),
                }
            }
            slopes.push((m, fit_scaling_exponent(&points)?, points.len()));
        }
        let slope_ok = slopes.iter().all(|&(m, s, _)| match m {
            Mechanism::Kernel => in_range(s, 0.8, 1.3),
            Mechanism::Dot => in_range(s, 1.7, 2.3),
        });
        let (peak, model) = dot_peak.unwrap_or((0.0, 1.0));
        let peak_ok = (peak - model).abs() <= 0.15 * model;
        let mut detail: Vec<String> = slopes
            .iter()
            .map(|(m, s, k)| format!("{m} slope {s:.3} over {k} sizes"))
            .collect();
        detail.push(format!("dot peak @4096 {:.1} MB vs model {:.1} MB", peak / 1e6, model / 1e6));
        if !skipped.is_empty() {
            detail.push(format!("skipped {}", skipped.join(" ")));
        }
        Ok((slope_ok && peak_ok, detail.join("; ")))
    })
}

pub const GRADIENT_SEEDS: u64 = 20;

type Inputs = Vec<(String, Tensor<f64>)>;

fn named(pairs: Vec<(&str, Tensor<f64>)>) -> Inputs {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn param_inputs(p: &network::ModelParams<f64>) -> Inputs {
    p.iter().map(|(k, t)| (k.to_string(), t.clone())).collect()
}

fn param_vars(names: &[String], vars: &[Var]) -> ParamVars {
    names.iter().zip(vars).map(|(n, &v)| (n.clone(), v)).collect()
}

/// The smallest network that runs every stage on a 32×32 input.
pub fn gradcheck_config() -> ManetConfig {
    ManetConfig {
        input_channels: 3,
        stage_channels: [4, 4, 4, 8, 8],
        cardinality: 2,
        num_classes: 3,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    KernelAttention,
    Cam,
    AttentionBlock,
    ResNeXtBlock,
    Manet,
}

impl GradTarget {
    pub const ALL: [GradTarget; 5] = [
        GradTarget::KernelAttention,
        GradTarget::Cam,
        GradTarget::AttentionBlock,
        GradTarget::ResNeXtBlock,
        GradTarget::Manet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::KernelAttention => "kernel_attention_linear",
            GradTarget::Cam => "cam_forward",
            GradTarget::AttentionBlock => "attention_block_forward",
            GradTarget::ResNeXtBlock => "resnext_block_forward",
            GradTarget::Manet => "manet",
        }
    }
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

/// Gradient check of one target at one seed.
pub fn gradcheck_once(target: GradTarget, seed: u64) -> Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let opts = CheckOptions {
        seed,
        ..CheckOptions::default()
    };
    let res = match target {
        GradTarget::KernelAttention => {
            let inputs = named(vec![
                ("q", randn(&[9, 4], &mut r)),
                ("k", randn(&[9, 4], &mut r)),
                ("v", randn(&[9, 5], &mut r)),
            ]);
            check_graph(&inputs, |g, v| attention::kernel_attention_linear_var(g, v[0], v[1], v[2]), &opts)?
        }
        GradTarget::Cam => {
            let inputs = named(vec![
                ("x", randn(&[3, 4, 3], &mut r).map(|x| 0.5 * x)),
                ("beta", randn(&[1], &mut r)),
            ]);
            check_graph(&inputs, |g, v| attention::cam_forward_var(g, v[0], v[1]), &opts)?
        }
        GradTarget::AttentionBlock => {
            let p = AttentionBlockParams::<f64>::init(5, 4, &mut r)?;
            let inputs = named(vec![
                ("low", randn(&[2, 3, 4], &mut r)),
                ("high", randn(&[3, 3, 4], &mut r)),
                ("fw", p.fuse_weight),
                ("fb", randn(&[4], &mut r)),
                ("wq", p.kam.proj.wq),
                ("wk", p.kam.proj.wk),
                ("wv", p.kam.proj.wv),
                ("gamma", Tensor::scalar(0.7)),
                ("beta", Tensor::scalar(-0.4)),
            ]);
            check_graph(
                &inputs,
                |g, v| {
                    let block = BlockVars {
                        fuse_weight: v[2],
                        fuse_bias: v[3],
                        wq: v[4],
                        wk: v[5],
                        wv: v[6],
                        gamma: v[7],
                        beta: v[8],
                    };
                    attention::attention_block_var(g, v[0], v[1], &block)
                },
                &opts,
            )?
        }
        GradTarget::ResNeXtBlock => {
            let cfg = ResNeXtBlockConfig {
                in_channels: 4,
                mid_channels: 4,
                out_channels: 6,
                cardinality: 2,
                stride: 2,
            };
            let mut p = network::ModelParams::<f64>::new(seed);
            network::init_resnext_block(&mut p, "blk", &cfg, &mut r)?;
            let mut inputs = param_inputs(&p);
            inputs.push(("x".to_string(), randn(&[4, 6, 6], &mut r)));
            let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
            check_graph(
                &inputs,
                |g: &mut Graph<f64>, v: &[Var]| {
                    network::resnext_block_var(g, v[v.len() - 1], &cfg, &param_vars(&names, v), "blk")
                },
                &opts,
            )?
        }
        GradTarget::Manet => {
            let cfg = gradcheck_config();
            let mut p = network::init_params::<f64>(&cfg, seed)?;
            // live attention branches so their parameters carry gradient
            p.set_attention_scales(0.5);
            let sample = generate_synthetic_dataset::<f64>(1, 32, 3, seed)?.remove(0);
            let inputs = param_inputs(&p);
            let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
            let sampled = CheckOptions {
                coords_per_input: Some(3),
                ..opts
            };
            check_graph(
                &inputs,
                |g: &mut Graph<f64>, v: &[Var]| {
                    let x = g.input(sample.image.clone());
                    let logits = network::manet_var(g, x, &cfg, &param_vars(&names, v), Fusion::Attention)?;
                    g.cross_entropy(logits, &sample.labels)
                },
                &sampled,
            )?
        }
    };
    if res.checked == 0 {
        return Err(linattn_core::Error::Contract(format!("{}: no coordinate was checked", target.name())));
    }
    Ok(res.rel_err)
}

/// Worst error over `seeds` seeds for each target.
pub fn gradcheck_worst(targets: &[GradTarget], seeds: u64) -> Result<Vec<(GradTarget, f64)>> {
    targets
        .iter()
        .map(|&t| {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                worst = worst.max(gradcheck_once(t, seed)?);
            }
            Ok((t, worst))
        })
        .collect()
}

pub fn gradients(tol: &Tolerances) -> Check {
    timed(5, "gradient correctness", || {
        let worst = gradcheck_worst(&GradTarget::ALL, GRADIENT_SEEDS)?;
        let ok = worst.iter().all(|&(_, e)| e <= tol.gradient);
        let detail = worst
            .iter()
            .map(|(t, e)| format!("{} {e:.1e}", t.name()))
            .collect::<Vec<_>>()
            .join(", ");
        Ok((ok, format!("{GRADIENT_SEEDS} seeds each: {detail}")))
    })
}

pub fn metrics_oracle(tol: &Tolerances) -> Check {
    timed(6, "metrics oracle", || {
        let mut failures = Vec::new();
        let r = ConfusionMatrix::from_counts(&[vec![3, 1], vec![2, 4]])?.report()?;
        let want = [0.7, 0.708333, 0.4, 0.535714, 0.542857, 0.696970];
        for ((name, got), w) in r.headline().into_iter().zip(want) {
            if !((got - w).abs() <= tol.metrics) {
                failures.push(format!("{name} {got:.6} != {w}"));
            }
        }

        let reference: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let mut cm = ConfusionMatrix::new(3)?;
        cm.accumulate(&reference, &reference)?;
        for (name, v) in cm.report()?.headline() {
            if v != 1.0 {
                failures.push(format!("perfect {name} = {v}"));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for k in [2usize, 3, 5] {
            let n = 100_000;
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let mut cm = ConfusionMatrix::new(k)?;
            cm.accumulate(&pred, &truth)?;
            let r = cm.report()?;
            if (r.pa - 1.0 / k as f64).abs() > 0.05 || r.kappa.abs() > 0.05 {
                failures.push(format!("random k={k}: pa {:.3} kappa {:.3}", r.pa, r.kappa));
            }
        }
        let detail = if failures.is_empty() {
            "hand matrix, perfect and random-prediction properties hold".to_string()
        } else {
            failures.join("; ")
        };
        Ok((failures.is_empty(), detail))
    })
}

/// Settings for the toy training run.
#[derive(Clone, Debug)]
pub struct DemoSettings {
    pub samples: usize,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
    pub train: TrainOptions,
    pub smoothing: usize,
}

impl Default for DemoSettings {
    fn default() -> Self {
        DemoSettings {
            samples: 40,
            size: 32,
            classes: 3,
            seed: 1,
            train: TrainOptions {
                seed: 1,
                ..TrainOptions::default()
            },
            smoothing: 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DemoSummary {
    pub initial_loss: f64,
    pub final_smoothed: f64,
    pub miou: f64,
    pub pa: f64,
}

impl DemoSummary {
    /// Smoothed final loss at most half the initial loss and held-out mIoU
    /// above chance for three classes.
    pub fn passes(&self) -> bool {
        self.final_smoothed <= 0.5 * self.initial_loss && self.miou > 1.0 / 3.0
    }
}

/// Initial loss is the mean of the first `smoothing` batch losses.
pub fn summarize(losses: &[f64], smoothing: usize, miou: f64, pa: f64) -> DemoSummary {
    let head = &losses[..smoothing.min(losses.len()).max(1)];
    DemoSummary {
        initial_loss: head.iter().sum::<f64>() / head.len() as f64,
        final_smoothed: *smoothed(losses, smoothing).last().unwrap_or(&f64::NAN),
        miou,
        pa,
    }
}

pub fn training(s: &DemoSettings) -> Check {
    timed(7, "toy training demo", || {
        let cfg = ManetConfig::tiny(s.classes);
        let data = generate_synthetic_dataset::<f32>(s.samples, s.size, s.classes, s.seed)?;
        let out = train_demo(&cfg, &data, &s.train)?;
        let sum = summarize(&out.losses, s.smoothing, out.report.miou, out.report.pa);
        Ok((
            sum.passes(),
            format!(
                "{} steps: loss {:.3} -> {:.3} (smoothed), held-out mIoU {:.3}, PA {:.3}",
                out.losses.len(),
                sum.initial_loss,
                sum.final_smoothed,
                sum.miou,
                sum.pa
            ),
        ))
    })
}

fn convex(out: &Tensor<f64>, v: &Tensor<f64>) -> bool {
    let (n, dv) = (v.dim(0), v.dim(1));
    (0..dv).all(|c| {
        let col = (0..n).map(|i| v.at2(i, c));
        let lo = col.clone().fold(f64::INFINITY, f64::min);
        let hi = col.fold(f64::NEG_INFINITY, f64::max);
        let slack = 1e-12 * lo.abs().max(hi.abs()).max(1.0);
        (0..out.dim(0)).all(|i| (lo - slack..=hi + slack).contains(&out.at2(i, c)))
    })
}

pub fn structural() -> Check {
    timed(8, "structural invariants", || {
        let mut failures: Vec<String> = Vec::new();
        let mut r = ChaCha8Rng::seed_from_u64(8);

        for _ in 0..10 {
            let q = randn(&[40, 8], &mut r);
            let k = randn(&[40, 8], &mut r);
            let v = randn(&[40, 6], &mut r);
            if !convex(&attention::dot_attention(&q, &k, &v)?, &v)
                || !convex(&attention::kernel_attention_linear(&q, &k, &v)?, &v)
            {
                failures.push("convex bounds".into());
                break;
            }
        }

        let n = 64;
        let v = randn(&[n, 5], &mut r);
        let mixed = Tensor::from_fn(&[n, 4], |i| if i % 3 == 0 { 1e4 } else { -1e4 });
        for (name, q, k) in [
            ("all -1e4", Tensor::full(&[n, 4], -1e4), Tensor::full(&[n, 4], -1e4)),
            ("all +1e4", Tensor::full(&[n, 4], 1e4), Tensor::full(&[n, 4], 1e4)),
            ("mixed", mixed.clone(), mixed.map(|x| -x)),
        ] {
            let ok = attention::kernel_attention_linear(&q, &k, &v).map(|o| o.is_finite() && convex(&o, &v));
            if !matches!(ok, Ok(true)) {
                failures.push(format!("denominator {name}"));
            }
        }

        let low = randn(&[3, 4, 4], &mut r);
        let high = randn(&[5, 4, 4], &mut r);
        let p = AttentionBlockParams::init(8, 6, &mut r)?;
        let cat = ops::concat_channels(&low, &high)?;
        let z = ops::conv2d_grouped(&cat, &p.fuse_weight, Default::default())?;
        let z = ops::channel_affine(&z, &Tensor::ones(&[6]), &p.fuse_bias)?;
        if attention::attention_block_forward(&low, &high, &p)? != z {
            failures.push("zero-scale block is not the fusion conv".into());
        }
        if attention::cam_forward(&low, 0.0)? != low {
            failures.push("cam with beta 0".into());
        }

        let cfg = gradcheck_config();
        let params = network::init_params::<f64>(&cfg, 3)?;
        let image = randn(&[3, 32, 32], &mut r);
        let full = network::manet_forward_with(&image, &cfg, &params, Fusion::Attention)?;
        let plain = network::manet_forward_with(&image, &cfg, &params, Fusion::ConvOnly)?;
        if full.rel_err(&plain) > 1e-12 {
            failures.push("ablation equivalence at zero scales".into());
        }

        if Tensor::<f64>::from_tns_bytes(&image.to_tns_bytes())? != image {
            failures.push("TNS round-trip".into());
        }
        let bytes = checkpoint::encode(&cfg, &params)?;
        let (cfg2, params2) = checkpoint::decode::<f64>(&bytes)?;
        let same = cfg2 == cfg
            && params2.len() == params.len()
            && params.iter().zip(params2.iter()).all(|((a, x), (b, y))| {
                a == b && x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
            });
        if !same {
            failures.push("checkpoint round-trip".into());
        }

        let detail = if failures.is_empty() {
            "convexity, denominator positivity, zero-scale identities, round-trips".to_string()
        } else {
            failures.join("; ")
        };
        Ok((failures.is_empty(), detail))
    })
}

/// Which checks [`run_suite`] includes.
#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub tolerances: Tolerances,
    /// Timing-based scaling check; slow and machine dependent.
    pub scaling: Option<ProfileOptions>,
    pub training: Option<DemoSettings>,
}

pub fn run_suite(opts: &SuiteOptions, mut on_check: impl FnMut(&Check)) -> Vec<Check> {
    let tol = &opts.tolerances;
    let mut out = Vec::new();
    let mut push = |c: Check| {
        on_check(&c);
        out.push(c);
    };
    push(exactness(tol));
    push(compute_figures());
    push(memory_figures());
    if let Some(p) = &opts.scaling {
        push(scaling(p));
    }
    push(gradients(tol));
    push(metrics_oracle(tol));
    if let Some(s) = &opts.training {
        push(training(s));
    }
    push(structural());
    out
}
