//! Central finite-difference verification of analytic gradients.
//!
//! Coordinates whose `+eps` or `-eps` evaluation switches the activation
//! pattern (a ReLU unit changing sign, a different pooling or max-merge
//! winner) straddle a kink, where the difference quotient does not estimate
//! the derivative; those are counted in `skipped_kinks` and excluded.
//!
//! Objectives report their loss as a list of terms. The checker subtracts
//! the `+eps` and `-eps` terms pairwise before summing, so terms a
//! coordinate does not touch cancel exactly instead of contributing their
//! rounding noise to the difference quotient.

use super::layers::{Cache, Mode, Param};
use super::loss::softmax_cross_entropy;
use super::sequential::Sequential;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A scalar function of parameters and inputs with analytic gradients.
pub trait Objective {
    /// Loss terms (the loss is their sum) and the activation pattern of the
    /// forward pass.
    fn evaluate(&mut self, inputs: &[Tensor<f64>]) -> Result<(Vec<f64>, Vec<u32>)>;
    /// Recomputes parameter gradients from zero and returns input gradients.
    fn gradients(&mut self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>;
    fn params_mut(&mut self) -> Vec<&mut Param<f64>>;
}

/// `projection * y`, elementwise.
pub fn projection_terms(y: &Tensor<f64>, projection: &Tensor<f64>) -> Result<Vec<f64>> {
    if y.shape() != projection.shape() {
        return Err(Error::ShapeMismatch(format!(
            "projection {:?} vs output {:?}",
            projection.shape(),
            y.shape()
        )));
    }
    Ok(y.data().iter().zip(projection.data()).map(|(a, b)| a * b).collect())
}

/// Mean softmax cross-entropy split per sample into `(max - z_label) / B`
/// and `ln(1 + sum of exp(z - max) over the non-max logits) / B`.
pub fn cross_entropy_terms(logits: &Tensor<f64>, labels: &[usize]) -> Result<Vec<f64>> {
    // validates shapes and labels
    softmax_cross_entropy(logits, labels)?;
    let classes = logits.shape()[1];
    let inv_b = 1.0 / labels.len() as f64;
    let mut terms = Vec::with_capacity(2 * labels.len());
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let top = (0..classes).fold(0, |best, c| if row[c] > row[best] { c } else { best });
        let rest: f64 = (0..classes)
            .filter(|&c| c != top)
            .map(|c| (row[c] - row[top]).exp())
            .sum();
        terms.push((row[top] - row[label]) * inv_b);
        terms.push(rest.ln_1p() * inv_b);
    }
    Ok(terms)
}

pub(crate) fn pattern_of(caches: &[Cache<f64>], out: &mut Vec<u32>) {
    for cache in caches {
        cache.activation_pattern(out);
    }
}

/// Softmax cross-entropy of a sequential classifier.
pub struct ClassifierObjective<'a> {
    pub net: &'a mut Sequential<f64>,
    pub labels: Vec<usize>,
    pub mode: Mode,
}

impl Objective for ClassifierObjective<'_> {
    fn evaluate(&mut self, inputs: &[Tensor<f64>]) -> Result<(Vec<f64>, Vec<u32>)> {
        let (logits, caches) = self.net.forward(&inputs[0], self.mode)?;
        let terms = cross_entropy_terms(&logits, &self.labels)?;
        let mut pattern = Vec::new();
        pattern_of(&caches, &mut pattern);
        Ok((terms, pattern))
    }

    fn gradients(&mut self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        self.net.zero_grad();
        let (logits, caches) = self.net.forward(&inputs[0], self.mode)?;
        let (_, grad) = softmax_cross_entropy(&logits, &self.labels)?;
        Ok(vec![self.net.backward(&caches, &grad)?])
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        self.net.params_mut()
    }
}

/// `sum(projection * net(x))`: a linear read-out that gives every output
/// element an O(1) gradient, used to check single layers in isolation.
pub struct ProjectionObjective {
    pub net: Sequential<f64>,
    pub projection: Tensor<f64>,
    pub mode: Mode,
}

impl Objective for ProjectionObjective {
    fn evaluate(&mut self, inputs: &[Tensor<f64>]) -> Result<(Vec<f64>, Vec<u32>)> {
        let (y, caches) = self.net.forward(&inputs[0], self.mode)?;
        let terms = projection_terms(&y, &self.projection)?;
        let mut pattern = Vec::new();
        pattern_of(&caches, &mut pattern);
        Ok((terms, pattern))
    }

    fn gradients(&mut self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        self.net.zero_grad();
        let (_, caches) = self.net.forward(&inputs[0], self.mode)?;
        Ok(vec![self.net.backward(&caches, &self.projection)?])
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        self.net.params_mut()
    }
}

/// Negates every analytic gradient of the wrapped objective: an injected
/// backward-pass fault that a working checker must catch.
pub struct SignFlipped<O>(pub O);

impl<O: Objective> Objective for SignFlipped<O> {
    fn evaluate(&mut self, inputs: &[Tensor<f64>]) -> Result<(Vec<f64>, Vec<u32>)> {
        self.0.evaluate(inputs)
    }

    fn gradients(&mut self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        let grads = self.0.gradients(inputs)?;
        for p in self.0.params_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = -*g);
        }
        Ok(grads.into_iter().map(|g| g.map(|v| -v)).collect())
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        self.0.params_mut()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max of `|a - n| / max(|a|, |n|, 1e-12)` over checked coordinates.
    pub max_rel_error: f64,
    /// Description of the coordinate that produced `max_rel_error`.
    pub worst: String,
    pub checked: usize,
    pub skipped_kinks: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// `(f(x + eps) - f(x - eps)) / 2 eps` with `f` the sum of the terms.
fn difference_quotient(plus: &[f64], minus: &[f64], eps: f64) -> Result<f64> {
    if plus.len() != minus.len() {
        return Err(Error::ShapeMismatch(format!(
            "objective returned {} and {} loss terms",
            plus.len(),
            minus.len()
        )));
    }
    let delta: f64 = plus.iter().zip(minus).map(|(p, m)| p - m).sum();
    Ok(delta / (2.0 * eps))
}

struct Tally {
    report: GradCheckReport,
}

impl Tally {
    fn record(&mut self, analytic: f64, numeric: f64, label: impl FnOnce() -> String) {
        let err = relative_error(analytic, numeric);
        self.report.checked += 1;
        if err > self.report.max_rel_error || self.report.checked == 1 {
            self.report.max_rel_error = err;
            self.report.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", label());
        }
    }
}

/// Compares analytic gradients of `objective` against central differences
/// `(f(x + eps) - f(x - eps)) / 2 eps` for every parameter and input
/// coordinate.
pub fn finite_diff_check<O: Objective + ?Sized>(
    objective: &mut O,
    inputs: &mut [Tensor<f64>],
    eps: f64,
) -> Result<GradCheckReport> {
    let input_grads = objective.gradients(inputs)?;
    let param_grads: Vec<Tensor<f64>> = objective
        .params_mut()
        .into_iter()
        .map(|p| p.grad.clone())
        .collect();
    let (_, base_pattern) = objective.evaluate(inputs)?;
    let mut tally = Tally {
        report: GradCheckReport {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
            skipped_kinks: 0,
        },
    };

    for (pi, analytic) in param_grads.iter().enumerate() {
        for j in 0..analytic.len() {
            let orig = objective.params_mut()[pi].value.data()[j];
            objective.params_mut()[pi].value.data_mut()[j] = orig + eps;
            let (plus, pat_plus) = objective.evaluate(inputs)?;
            objective.params_mut()[pi].value.data_mut()[j] = orig - eps;
            let (minus, pat_minus) = objective.evaluate(inputs)?;
            objective.params_mut()[pi].value.data_mut()[j] = orig;
            if pat_plus != base_pattern || pat_minus != base_pattern {
                tally.report.skipped_kinks += 1;
                continue;
            }
            let numeric = difference_quotient(&plus, &minus, eps)?;
            tally.record(analytic.data()[j], numeric, || format!("param {pi}[{j}]"));
        }
    }

    for (ii, analytic) in input_grads.iter().enumerate() {
        for j in 0..analytic.len() {
            let orig = inputs[ii].data()[j];
            inputs[ii].data_mut()[j] = orig + eps;
            let (plus, pat_plus) = objective.evaluate(inputs)?;
            inputs[ii].data_mut()[j] = orig - eps;
            let (minus, pat_minus) = objective.evaluate(inputs)?;
            inputs[ii].data_mut()[j] = orig;
            if pat_plus != base_pattern || pat_minus != base_pattern {
                tally.report.skipped_kinks += 1;
                continue;
            }
            let numeric = difference_quotient(&plus, &minus, eps)?;
            tally.record(analytic.data()[j], numeric, || format!("input {ii}[{j}]"));
        }
    }
    Ok(tally.report)
}

/// Gradient check of a sequential classifier under softmax cross-entropy
/// (training-mode batch statistics).
pub fn finite_diff_gradcheck(
    net: &mut Sequential<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    eps: f64,
) -> Result<GradCheckReport> {
    let mut objective = ClassifierObjective {
        net,
        labels: labels.to_vec(),
        mode: Mode::Train,
    };
    finite_diff_check(&mut objective, &mut [input.clone()], eps)
}
