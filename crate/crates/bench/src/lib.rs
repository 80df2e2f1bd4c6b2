//! Cost model and profiler comparing dot-product attention with softplus
//! kernel attention.
//!
//! The analytic side counts scalar operations and peak f32 buffer bytes for
//! one attention call given `Q, K ∈ R^{N×D_k}` and `V ∈ R^{N×D_v}`. The
//! measured side times the real kernels from `linattn-core` and reads the
//! tensor-buffer high-water mark from its allocation tracker.

pub mod report;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use linattn_core::attention;
use linattn_core::tensor::alloc::MemoryScope;
use linattn_core::{parallel, Error, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use report::{emit_report, to_csv, to_svg, CSV_HEADER};

/// The counting convention behind [`analytic_ops`] and [`analytic_bytes`].
pub const CONVENTION: &str = "ops: multiply and add counted separately (1 MAC = 2 ops), exp/log = 1 op, \
division = 1 op; Q/K/V projections excluded; bytes: 4 per scalar (f32), inputs + intermediates + output";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mechanism {
    Dot,
    Kernel,
}

impl Mechanism {
    pub const ALL: [Mechanism; 2] = [Mechanism::Dot, Mechanism::Kernel];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Dot => "dot",
            Mechanism::Kernel => "kernel",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Mechanism::Dot),
            "kernel" => Ok(Mechanism::Kernel),
            other => Err(Error::Config(format!("unknown mechanism {other:?} (dot|kernel)"))),
        }
    }
}

/// Attention problem size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub n: u64,
    pub dk: u64,
    pub dv: u64,
}

impl Dims {
    pub fn new(n: usize, dk: usize, dv: usize) -> Self {
        Dims {
            n: n as u64,
            dk: dk as u64,
            dv: dv as u64,
        }
    }
}

/// Scalar operation count of one attention call.
///
/// * dot: `QKᵀ` and `AV` cost `2N²D_k + 2N²D_v`; the row softmax costs
///   `3N²` (subtract max, exp, divide).
/// * kernel: `φ(K)ᵀV` and `φ(Q)(φ(K)ᵀV)` cost `4N·D_k·D_v`; the key sum and
///   the query-sum products `2N·D_k` each; softplus on Q and K `2N·D_k`;
///   the final division `N·D_v`.
pub fn analytic_ops(m: Mechanism, d: Dims) -> u64 {
    let Dims { n, dk, dv } = d;
    match m {
        Mechanism::Dot => 2 * n * n * (dk + dv) + 3 * n * n,
        Mechanism::Kernel => 4 * n * dk * dv + 2 * n * dk + 2 * n * dk + 2 * n * dk + n * dv,
    }
}

/// Peak bytes of f32 buffers live during one attention call.
///
/// * dot: inputs `N(2D_k + D_v)`, the `N×N` score matrix (normalized in
///   place) and the `N×D_v` output.
/// * kernel: inputs, `φ(Q)` and `φ(K)` (`2N·D_k`), `φ(K)ᵀV` (`D_k·D_v`), the
///   key sum (`D_k`) and the output.
pub fn analytic_bytes(m: Mechanism, d: Dims) -> u64 {
    let Dims { n, dk, dv } = d;
    let inputs = n * (2 * dk + dv);
    let scalars = match m {
        Mechanism::Dot => n * n + inputs + n * dv,
        Mechanism::Kernel => inputs + 2 * n * dk + dk * dv + dk + n * dv,
    };
    4 * scalars
}

#[derive(Clone, Debug)]
pub struct ProfileOptions {
    pub warmup: usize,
    pub repeats: usize,
    /// Configurations whose analytic footprint exceeds this are skipped.
    pub memory_budget: u64,
    pub seed: u64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            warmup: 1,
            repeats: 3,
            memory_budget: 512 << 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Measurement {
    Done {
        median_ns: u64,
        /// Tracked tensor-buffer peak, inputs included.
        peak_bytes: u64,
        samples_ns: Vec<u64>,
    },
    Skipped(String),
}

impl Measurement {
    pub fn median_ns(&self) -> Option<u64> {
        match self {
            Measurement::Done { median_ns, .. } => Some(*median_ns),
            Measurement::Skipped(_) => None,
        }
    }

    pub fn peak_bytes(&self) -> Option<u64> {
        match self {
            Measurement::Done { peak_bytes, .. } => Some(*peak_bytes),
            Measurement::Skipped(_) => None,
        }
    }
}

fn run_once(m: Mechanism, q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>) -> Result<Tensor<f32>> {
    match m {
        Mechanism::Dot => attention::dot_attention(q, k, v),
        Mechanism::Kernel => attention::kernel_attention_linear(q, k, v),
    }
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        (xs[mid - 1] + xs[mid]) / 2
    }
}

/// Times one mechanism single-threaded and records its buffer peak.
///
/// Inputs are drawn inside the tracked scope so the peak covers the same
/// buffers as [`analytic_bytes`]. Returns [`Measurement::Skipped`] when the
/// analytic footprint exceeds the memory budget.
pub fn measured_profile(m: Mechanism, d: Dims, opts: &ProfileOptions) -> Result<Measurement> {
    if opts.repeats < 3 {
        return Err(Error::Config(format!("need at least 3 repeats, got {}", opts.repeats)));
    }
    let need = analytic_bytes(m, d);
    if need > opts.memory_budget {
        return Ok(Measurement::Skipped(format!(
            "needs {need} bytes, budget {}",
            opts.memory_budget
        )));
    }
    let was_parallel = parallel::enabled();
    parallel::set_threads(1);
    let result = profile_inner(m, d, opts);
    if was_parallel {
        parallel::set_threads(rayon_threads());
    }
    result
}

fn rayon_threads() -> usize {
    std::thread::available_parallelism().map_or(1, usize::from)
}

fn profile_inner(m: Mechanism, d: Dims, opts: &ProfileOptions) -> Result<Measurement> {
    let (n, dk, dv) = (d.n as usize, d.dk as usize, d.dv as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut samples = Vec::with_capacity(opts.repeats);
    let mut peak = 0u64;
    for i in 0..opts.warmup + opts.repeats {
        let scope = MemoryScope::start();
        let q = Tensor::<f32>::randn(&[n, dk], 1.0, &mut rng);
        let k = Tensor::<f32>::randn(&[n, dk], 1.0, &mut rng);
        let v = Tensor::<f32>::randn(&[n, dv], 1.0, &mut rng);
        let start = Instant::now();
        let out = run_once(m, &q, &k, &v)?;
        let elapsed = start.elapsed().as_nanos() as u64;
        std::hint::black_box(&out);
        peak = peak.max(scope.peak_bytes() as u64);
        if i >= opts.warmup {
            samples.push(elapsed.max(1));
        }
    }
    Ok(Measurement::Done {
        median_ns: median(samples.clone()),
        peak_bytes: peak,
        samples_ns: samples,
    })
}

/// Least-squares slope of `ln y` against `ln N`.
pub fn fit_scaling_exponent(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::Config(format!("need at least 3 points, got {}", points.len())));
    }
    if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::Config("N values must be strictly increasing".into()));
    }
    if let Some(&(n, y)) = points.iter().find(|&&(n, y)| !(n > 0.0 && y > 0.0)) {
        return Err(Error::Numeric {
            op: "fit_scaling_exponent",
            detail: format!("log-log fit needs positive values, got ({n}, {y})"),
        });
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(n, y)| (n.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = logs.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|&(x, _)| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub mechanism: Mechanism,
    pub dims: Dims,
    pub analytic_ops: u64,
    pub analytic_bytes: u64,
    /// `None` in analytic-only mode.
    pub measured: Option<Measurement>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    /// Emitted as `#` comment lines at the top of the CSV.
    pub notes: Vec<String>,
}

impl CostReport {
    pub fn rows_for(&self, m: Mechanism) -> impl Iterator<Item = &CostRow> {
        self.rows.iter().filter(move |r| r.mechanism == m)
    }

    /// `(N, median ns)` for the measured rows of one mechanism.
    pub fn runtime_points(&self, m: Mechanism) -> Vec<(f64, f64)> {
        self.rows_for(m)
            .filter_map(|r| {
                let ns = r.measured.as_ref()?.median_ns()?;
                Some((r.dims.n as f64, ns as f64))
            })
            .collect()
    }
}

/// Reference-machine description for report headers.
pub fn machine_notes() -> Vec<String> {
    vec![
        format!("convention: {CONVENTION}"),
        format!(
            "machine: {} {} logical cpus={}",
            std::env::consts::OS,
            std::env::consts::ARCH,
            rayon_threads()
        ),
        "timing: single thread, median of repeats after warmup".to_string(),
    ]
}

/// Analytic rows for every mechanism and size, measured too when `opts` is
/// given.
pub fn build_report(ns: &[usize], dk: usize, dv: usize, opts: Option<&ProfileOptions>) -> Result<CostReport> {
    if ns.is_empty() || ns.contains(&0) || dk == 0 || dv == 0 {
        return Err(Error::Config(format!("sizes must be positive: N={ns:?}, dk={dk}, dv={dv}")));
    }
    let mut report = CostReport {
        rows: Vec::new(),
        notes: machine_notes(),
    };
    for m in Mechanism::ALL {
        for &n in ns {
            let dims = Dims::new(n, dk, dv);
            let measured = opts.map(|o| measured_profile(m, dims, o)).transpose()?;
            report.rows.push(CostRow {
                mechanism: m,
                dims,
                analytic_ops: analytic_ops(m, dims),
                analytic_bytes: analytic_bytes(m, dims),
                measured,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3, 1, 2]), 2);
        assert_eq!(median(vec![4, 1, 3, 2]), 2);
    }

    #[test]
    fn mechanism_parsing() {
        assert_eq!("dot".parse::<Mechanism>().unwrap(), Mechanism::Dot);
        assert!("softmax".parse::<Mechanism>().is_err());
    }
}
