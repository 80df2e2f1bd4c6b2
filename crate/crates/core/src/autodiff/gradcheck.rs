//! Central finite differences, used as the independent oracle for
//! [`Graph::backward`](super::Graph::backward).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default base step for f64 checks.
pub const DEFAULT_STEP: f64 = 1e-6;

fn step_for(x: f64, h: f64) -> f64 {
    h * x.abs().max(1.0)
}

fn finite(v: f64, at: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(
            "finite_diff_grad",
            format!("objective returned {v} while perturbing coordinate {at}"),
        ))
    }
}

/// `(f(x + hᵢeᵢ) − f(x − hᵢeᵢ)) / 2hᵢ` for one coordinate, with
/// `hᵢ = h·max(1, |xᵢ|)`.
pub fn central_difference<F>(f: &mut F, x: &Tensor<f64>, index: usize, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let x0 = x.data()[index];
    let step = step_for(x0, h);
    probe.data_mut()[index] = x0 + step;
    let plus = finite(f(&probe)?, index)?;
    probe.data_mut()[index] = x0 - step;
    let minus = finite(f(&probe)?, index)?;
    Ok((plus - minus) / (2.0 * step))
}

/// Full finite-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        out.data_mut()[i] = central_difference(&mut f, x, i, h)?;
    }
    Ok(out)
}

/// Central difference for piecewise-smooth objectives.
///
/// `f` returns its value together with a signature of the active linear
/// pieces (see [`Graph::relu_signature`](super::Graph::relu_signature)).
/// Returns `None` when the signature at `x ± hᵢeᵢ` differs from the one at
/// `x`, i.e. the stencil straddles a kink and the difference quotient is not
/// a derivative estimate.
pub fn central_difference_piecewise<F>(
    f: &mut F,
    x: &Tensor<f64>,
    index: usize,
    h: f64,
) -> Result<Option<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<(f64, u64)>,
{
    let (_, base) = f(x)?;
    let mut probe = x.clone();
    let x0 = x.data()[index];
    let step = step_for(x0, h);
    probe.data_mut()[index] = x0 + step;
    let (plus, sp) = f(&probe)?;
    probe.data_mut()[index] = x0 - step;
    let (minus, sm) = f(&probe)?;
    if sp != base || sm != base {
        return Ok(None);
    }
    Ok(Some((finite(plus, index)? - finite(minus, index)?) / (2.0 * step)))
}

/// `max|a − n| / max(max|a|, max|n|)`; zero when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Settings for [`check_graph`].
#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Coordinates probed per input; `None` probes all of them.
    pub coords_per_input: Option<usize>,
    /// Seeds the output projection and the coordinate sample.
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: DEFAULT_STEP,
            coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    /// [`relative_error`] over all probed coordinates of all inputs.
    pub rel_err: f64,
    pub checked: usize,
    /// Coordinates whose stencil crossed a ReLU kink.
    pub skipped: usize,
}

/// Compares [`Graph::backward`] with central differences for a function
/// built by `build` from named inputs.
///
/// A non-scalar output `y` is reduced to `Σ r⊙y` with a fixed random `r`, so
/// every output coordinate contributes to the checked gradient.
pub fn check_graph<S, F>(inputs: &[(S, Tensor<f64>)], build: F, opts: &CheckOptions) -> Result<CheckResult>
where
    S: AsRef<str>,
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut weights: Option<Tensor<f64>> = None;
    let mut eval = |values: &[Tensor<f64>], want_grads: bool| -> Result<(f64, u64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(values)
            .map(|((name, _), v)| g.param(name.as_ref(), v.clone()))
            .collect();
        let mut out = build(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            let shape = g.shape(out).to_vec();
            let r = weights
                .get_or_insert_with(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xa5a5);
                    Tensor::uniform(&shape, -1.0, 1.0, &mut rng)
                })
                .clone();
            let rv = g.input(r);
            let prod = g.mul(out, rv)?;
            out = g.sum(prod);
        }
        let loss = g.value(out).item()?;
        let grads = if want_grads {
            let gr = g.backward(out)?;
            vars.iter().map(|&v| gr.get(v)).collect()
        } else {
            Vec::new()
        };
        Ok((loss, g.relu_signature(), grads))
    };

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (_, _, analytic) = eval(&values, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (mut a, mut n, mut skipped) = (Vec::new(), Vec::new(), 0);
    for which in 0..values.len() {
        let len = values[which].len();
        let coords: Vec<usize> = match opts.coords_per_input {
            Some(c) if c < len => sample(&mut rng, len, c).into_vec(),
            _ => (0..len).collect(),
        };
        for idx in coords {
            let x = values[which].clone();
            let mut f = |probe: &Tensor<f64>| {
                let saved = std::mem::replace(&mut values[which], probe.clone());
                let r = eval(&values, false);
                values[which] = saved;
                r.map(|(l, s, _)| (l, s))
            };
            match central_difference_piecewise(&mut f, &x, idx, opts.step)? {
                Some(d) => {
                    a.push(analytic[which].data()[idx]);
                    n.push(d);
                }
                None => skipped += 1,
            }
        }
    }
    Ok(CheckResult {
        rel_err: relative_error(&a, &n),
        checked: a.len(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-6).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-5);
    }

    #[test]
    fn linear_is_exact_for_any_step() {
        let x = Tensor::from_vec(&[3], vec![0.5, -2.0, 7.0]).unwrap();
        for h in [1e-6, 1e-3, 0.5] {
            let g = finite_diff_grad(
                |t| Ok(2.0 * t.data()[0] - 3.0 * t.data()[1] + 0.25 * t.data()[2]),
                &x,
                h,
            )
            .unwrap();
            for (got, want) in g.data().iter().zip([2.0, -3.0, 0.25]) {
                assert!((got - want).abs() < 1e-8, "h={h}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let r = finite_diff_grad(|t| Ok(1.0 / (t.data()[0] - 1e-6)), &x, 1e-6);
        assert!(matches!(r, Err(Error::Numeric { .. })));
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn piecewise_detects_kink() {
        let x = Tensor::from_vec(&[1], vec![1e-9]).unwrap();
        let mut f = |t: &Tensor<f64>| {
            let v = t.data()[0];
            Ok((v.max(0.0), u64::from(v > 0.0)))
        };
        assert_eq!(central_difference_piecewise(&mut f, &x, 0, 1e-6).unwrap(), None);
        let x = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let d = central_difference_piecewise(&mut f, &x, 0, 1e-6).unwrap().unwrap();
        assert!((d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn graph_check_on_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let r = check_graph(
            &[("a", a), ("b", b)],
            |g, v| g.matmul(v[0], v[1]),
            &CheckOptions::default(),
        )
        .unwrap();
        assert_eq!((r.checked, r.skipped), (20, 0));
        assert!(r.rel_err < 1e-8, "{r:?}");
    }
}
