//! L2-regularized logistic regression on pooled embeddings, and the gap
//! experiment built on it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProbeConfig {
    /// Positive training examples per run.
    pub x: usize,
    /// Negatives per positive.
    pub f: usize,
    /// Images withheld from training at each end of the ranking.
    pub k_holdout: usize,
    pub runs: usize,
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            x: 100,
            f: 1,
            k_holdout: 100,
            runs: 10,
            l2_lambda: 1e-4,
            learning_rate: 0.1,
            max_iters: 500,
            tolerance: 1e-6,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.x == 0 || self.f == 0 || self.runs == 0 {
            return Err(Error::InvalidArgument("x, f and runs must be at least 1".into()));
        }
        let rates_ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && self.l2_lambda.is_finite()
            && self.l2_lambda >= 0.0;
        if !rates_ok {
            return Err(Error::InvalidArgument("learning rate must be positive, lambda non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Probe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub iterations: usize,
    /// Loss after each accepted step, starting with the initial loss.
    pub loss_history: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + libm::log1p(libm::exp(-z))
    } else {
        libm::log1p(libm::exp(z))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean logistic loss plus `lambda/2 · |w|²`; the bias is not penalized.
pub fn logistic_loss(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[f64], lambda: f64) -> f64 {
    let n = xs.len() as f64;
    let data: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| {
            let z = dot(w, x) + b;
            softplus(z) - y * z
        })
        .sum();
    data / n + 0.5 * lambda * dot(w, w)
}

/// Gradient of [`logistic_loss`] in `(w, b)`.
pub fn logistic_grad(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let r = sigmoid(dot(w, x) + b) - y;
        for (g, xi) in gw.iter_mut().zip(x) {
            *g += r * xi;
        }
        gb += r;
    }
    for (g, wi) in gw.iter_mut().zip(w) {
        *g = *g / n + lambda * wi;
    }
    (gw, gb / n)
}

fn standardization(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = xs[0].len();
    let n = xs.len() as f64;
    let mut mean = vec![0.0; dim];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for x in xs {
        for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    // constant columns keep unit scale
    let scale = var
        .into_iter()
        .map(|s| {
            let sd = libm::sqrt(s / n);
            if sd > 0.0 { sd } else { 1.0 }
        })
        .collect();
    (mean, scale)
}

impl Probe {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(dot(&self.weights, &self.standardize(x)) + self.bias)
    }

    /// Positive iff probability ≥ 0.5.
    pub fn predict(&self, x: &[f64]) -> bool {
        self.predict_proba(x) >= 0.5
    }
}

/// Full-batch gradient descent on standardized features. A step that raises
/// the loss is rejected and the learning rate halved, so the recorded loss
/// never increases.
pub fn train_probe(positives: &[Vec<f64>], negatives: &[Vec<f64>], config: &ProbeConfig) -> Result<Probe> {
    if positives.is_empty() {
        return Err(Error::EmptyInput("positive examples"));
    }
    if negatives.is_empty() {
        return Err(Error::EmptyInput("negative examples"));
    }
    let dim = positives[0].len();
    if let Some(v) = positives.iter().chain(negatives).find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, found: v.len() });
    }
    let raw: Vec<Vec<f64>> = positives.iter().chain(negatives).cloned().collect();
    let ys: Vec<f64> = positives.iter().map(|_| 1.0).chain(negatives.iter().map(|_| 0.0)).collect();
    let (mean, scale) = standardization(&raw);
    let xs: Vec<Vec<f64>> = raw
        .iter()
        .map(|x| x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
        .collect();

    let lambda = config.l2_lambda;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut lr = config.learning_rate;
    let mut loss = logistic_loss(&w, b, &xs, &ys, lambda);
    let mut history = vec![loss];
    let mut iterations = 0;
    while iterations < config.max_iters {
        let (gw, gb) = logistic_grad(&w, b, &xs, &ys, lambda);
        let gmax = gw.iter().fold(libm::fabs(gb), |m, g| m.max(libm::fabs(*g)));
        if !gmax.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: iterations });
        }
        if gmax < config.tolerance {
            break;
        }
        iterations += 1;
        loop {
            let nw: Vec<f64> = w.iter().zip(&gw).map(|(wi, g)| wi - lr * g).collect();
            let nb = b - lr * gb;
            let nl = logistic_loss(&nw, nb, &xs, &ys, lambda);
            if !nl.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: iterations });
            }
            if nl <= loss {
                w = nw;
                b = nb;
                loss = nl;
                history.push(loss);
                break;
            }
            lr *= 0.5;
            if lr < 1e-12 {
                // no descent step exists at machine precision
                return Ok(Probe { weights: w, bias: b, mean, scale, iterations, loss_history: history });
            }
        }
    }
    Ok(Probe { weights: w, bias: b, mean, scale, iterations, loss_history: history })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProbeRun {
    pub pa_s: f64,
    pub pa_c: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProbeResult {
    pub per_run: Vec<ProbeRun>,
    pub mean_gap: f64,
    pub mean_pa_s: f64,
    pub mean_pa_c: f64,
    /// Mean accuracy on the optional validation sets; absent when none given.
    pub val_accuracy_positive: Option<f64>,
    pub val_accuracy_negative: Option<f64>,
}

/// Inputs to [`probe_gap_experiment`]. `ranked` holds the target class's
/// embeddings in descending spuriosity order.
#[derive(Debug, Clone, Copy)]
pub struct ProbeData<'a> {
    pub ranked: &'a [Vec<f64>],
    pub others: &'a [Vec<f64>],
    pub val_positive: &'a [Vec<f64>],
    pub val_negative: &'a [Vec<f64>],
}

pub fn probe_run_purpose(run: usize) -> alloc::string::String {
    format!("probe/run/{run}")
}

fn accuracy(probe: &Probe, xs: &[Vec<f64>], label: bool) -> f64 {
    xs.iter().filter(|x| probe.predict(x) == label).count() as f64 / xs.len() as f64
}

/// Per run: withhold `k_holdout` images at each end of the ranking, sample
/// `x` positives from the middle and `f·x` negatives from `others`, train,
/// and score the `eval_k` most and least spurious positives.
pub fn probe_gap_experiment(
    data: ProbeData<'_>,
    config: &ProbeConfig,
    eval_k: usize,
    seed: u64,
) -> Result<ProbeResult> {
    config.validate()?;
    if eval_k == 0 || eval_k > config.k_holdout {
        return Err(Error::InvalidArgument(format!(
            "eval_k {eval_k} must be in 1..={}",
            config.k_holdout
        )));
    }
    let n = data.ranked.len();
    let middle_needed = 2 * config.k_holdout + config.x;
    if n < middle_needed {
        return Err(Error::InsufficientPool { required: middle_needed, available: n });
    }
    let neg_needed = config.f * config.x;
    if data.others.len() < neg_needed {
        return Err(Error::InsufficientPool { required: neg_needed, available: data.others.len() });
    }
    let middle = &data.ranked[config.k_holdout..n - config.k_holdout];
    let top = &data.ranked[..eval_k];
    let bottom = &data.ranked[n - eval_k..];

    let mut per_run = Vec::with_capacity(config.runs);
    let (mut vp, mut vn) = (0.0, 0.0);
    for run in 0..config.runs {
        let mut stream = Stream::for_purpose(seed, &probe_run_purpose(run));
        let pos = stream.sample(middle, config.x);
        let neg = stream.sample(data.others, neg_needed);
        let probe = train_probe(&pos, &neg, config)?;
        let pa_s = accuracy(&probe, top, true);
        let pa_c = accuracy(&probe, bottom, true);
        per_run.push(ProbeRun { pa_s, pa_c, gap: pa_s - pa_c });
        if !data.val_positive.is_empty() {
            vp += accuracy(&probe, data.val_positive, true);
        }
        if !data.val_negative.is_empty() {
            vn += accuracy(&probe, data.val_negative, false);
        }
    }
    let runs = config.runs as f64;
    let mean = |f: fn(&ProbeRun) -> f64| per_run.iter().map(f).sum::<f64>() / runs;
    Ok(ProbeResult {
        mean_gap: mean(|r| r.gap),
        mean_pa_s: mean(|r| r.pa_s),
        mean_pa_c: mean(|r| r.pa_c),
        val_accuracy_positive: (!data.val_positive.is_empty()).then_some(vp / runs),
        val_accuracy_negative: (!data.val_negative.is_empty()).then_some(vn / runs),
        per_run,
    })
}
