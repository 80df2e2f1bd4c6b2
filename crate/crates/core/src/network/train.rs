//! Adam training on pixelwise cross-entropy, for the synthetic demo.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::Sample;
use super::{argmax_labels, manet_var, Fusion, ManetConfig, ModelParams};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    cfg: AdamConfig,
    step: i32,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One bias-corrected update of every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::dim(
                    "adam",
                    format!("gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.shape()),
                ));
            }
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi.as_f64();
                let mn = beta1 * mi.as_f64() + (1.0 - beta1) * gi;
                let vn = beta2 * vi.as_f64() + (1.0 - beta2) * gi * gi;
                *mi = T::of(mn);
                *vi = T::of(vn);
                let delta = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *pi = T::of(pi.as_f64() - delta);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    /// Fraction of samples held out for evaluation.
    pub holdout: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 300,
            batch_size: 4,
            holdout: 0.2,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub params: ModelParams<T>,
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
    pub report: MetricReport,
    pub train_samples: usize,
    pub eval_samples: usize,
}

/// Loss and parameter gradients for one sample.
pub fn loss_and_grads<T: Scalar>(
    cfg: &ManetConfig,
    params: &ModelParams<T>,
    sample: &Sample<T>,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let x = g.input(sample.image.clone());
    let logits = manet_var(&mut g, x, cfg, &vars, Fusion::Attention)?;
    let loss = g.cross_entropy(logits, &sample.labels)?;
    let value = g.value(loss).item()?.as_f64();
    Ok((value, g.backward(loss)?.by_name()))
}

/// Splits off the last `holdout` fraction (at least one sample each side).
pub fn split<T: Scalar>(data: &[Sample<T>], holdout: f64) -> Result<(&[Sample<T>], &[Sample<T>])> {
    if data.len() < 2 {
        return Err(Error::Config(format!("need at least 2 samples to hold some out, got {}", data.len())));
    }
    if !(holdout > 0.0 && holdout < 1.0) {
        return Err(Error::Config(format!("holdout fraction must be in (0, 1), got {holdout}")));
    }
    let eval = ((data.len() as f64 * holdout).round() as usize).clamp(1, data.len() - 1);
    Ok(data.split_at(data.len() - eval))
}

/// Confusion matrix of argmax predictions over a set of samples.
pub fn evaluate<T: Scalar>(cfg: &ManetConfig, params: &ModelParams<T>, data: &[Sample<T>]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(cfg.num_classes)?;
    for s in data {
        let logits = super::manet_forward(&s.image, cfg, params)?;
        cm.accumulate(&argmax_labels(&logits), &s.labels)?;
    }
    Ok(cm)
}

/// Trains a freshly initialized model and reports metrics on the held-out
/// split. The model is initialized from `opts.seed`; batches are drawn by
/// reshuffling the training split every epoch.
pub fn train_demo<T: Scalar>(cfg: &ManetConfig, data: &[Sample<T>], opts: &TrainOptions) -> Result<TrainOutcome<T>> {
    if opts.steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let (train, eval) = split(data, opts.holdout)?;
    let mut params = super::init_params::<T>(cfg, opts.seed)?;
    let mut adam = Adam::new(opts.adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let mut batch_grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let mut batch_loss = 0.0;
        for _ in 0..opts.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled above");
            let (loss, grads) = loss_and_grads(cfg, &params, &train[idx]).map_err(|e| match e {
                Error::Numeric { op, detail } => {
                    Error::numeric("train_demo", format!("step {step}, sample {idx}: {op}: {detail}"))
                }
                other => other,
            })?;
            batch_loss += loss;
            for (name, g) in grads {
                match batch_grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        batch_grads.insert(name, g);
                    }
                }
            }
        }
        let loss = batch_loss / opts.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::numeric("train_demo", format!("loss became {loss} at step {step}")));
        }
        losses.push(loss);
        let inv = T::of(1.0 / opts.batch_size as f64);
        for g in batch_grads.values_mut() {
            g.map_inplace(|v| v * inv);
        }
        adam.update(&mut params, &batch_grads)?;
        if !params.is_finite() {
            return Err(Error::numeric("train_demo", format!("parameters became non-finite at step {step}")));
        }
    }

    let report = evaluate(cfg, &params, eval)?.report()?;
    Ok(TrainOutcome {
        params,
        losses,
        report,
        train_samples: train.len(),
        eval_samples: eval.len(),
    })
}

/// Trailing moving average with the given window.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..losses.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(smoothed(&[], 3), Vec::<f64>::new());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // the bias-corrected first step is lr·sign(g)
        let mut p = ModelParams::<f64>::new(0);
        p.insert("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(&[2], vec![0.5, -2.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default());
        adam.update(&mut p, &grads).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 3e-4)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 3e-4)).abs() < 1e-9);
    }

    #[test]
    fn split_sizes() {
        let data = super::super::data::generate_synthetic_dataset::<f32>(10, 16, 2, 0).unwrap();
        let (t, e) = split(&data, 0.2).unwrap();
        assert_eq!((t.len(), e.len()), (8, 2));
        assert!(split(&data[..1], 0.2).is_err());
    }
}
