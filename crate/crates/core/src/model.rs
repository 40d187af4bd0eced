//! Multinomial logistic regression: softmax over linear logits with
//! cross-entropy loss.
//!
//! Weights are stored class-major, `w[c * F + f]`, where `F` is the row length
//! of the dataset (bias column included), so `D = F * n_classes`.

use rand::seq::index;
use rand::Rng;

use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};

/// Global model `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams(pub Vec<f64>);

impl ModelParams {
    pub fn zeros(dim: usize) -> Self {
        ModelParams(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `w <- w - step * direction`
    pub fn descend(&mut self, step: f64, direction: &[f64]) {
        for (w, d) in self.0.iter_mut().zip(direction) {
            *w -= step * d;
        }
    }
}

/// A gradient of the loss with respect to `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Loss and accuracy of a model on a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

#[inline]
fn dot(w: &[f64], x: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let wc = w.chunks_exact(4);
    let xc = x.chunks_exact(4);
    let (wr, xr) = (wc.remainder(), xc.remainder());
    for (a, b) in wc.zip(xc) {
        for k in 0..4 {
            acc[k] += a[k] * f64::from(b[k]);
        }
    }
    let tail: f64 = wr.iter().zip(xr).map(|(a, &b)| a * f64::from(b)).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn check_dims(w: &[f64], dataset: &Dataset) -> Result<()> {
    if w.len() != dataset.model_dim() {
        return Err(Error::invalid(format!(
            "model has {} parameters, dataset needs {}",
            w.len(),
            dataset.model_dim()
        )));
    }
    Ok(())
}

/// Writes softmax probabilities for row `x` into `probs` and returns the
/// log-partition `log sum_c exp(logit_c)`.
fn softmax_row(w: &[f64], x: &[f32], probs: &mut [f64]) -> f64 {
    let f = x.len();
    for (c, p) in probs.iter_mut().enumerate() {
        *p = dot(&w[c * f..(c + 1) * f], x);
    }
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for p in probs.iter_mut() {
        *p = (*p - max).exp();
        z += *p;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    max + z.ln()
}

/// Mean cross-entropy and its gradient over the samples `indices`.
pub fn batch_loss_and_gradient(
    w: &[f64],
    dataset: &Dataset,
    indices: &[usize],
) -> Result<(f64, Gradient)> {
    check_dims(w, dataset)?;
    if indices.is_empty() {
        return Err(Error::State("gradient over an empty batch".into()));
    }
    let f = dataset.n_features();
    let k = dataset.n_classes();
    let scale = 1.0 / indices.len() as f64;
    let mut grad = vec![0.0; w.len()];
    let mut probs = vec![0.0; k];
    let mut loss = 0.0;
    for &i in indices {
        let x = dataset.row(i);
        let y = dataset.label(i);
        let log_z = softmax_row(w, x, &mut probs);
        loss += log_z - dot(&w[y * f..(y + 1) * f], x);
        probs[y] -= 1.0;
        for (c, &r) in probs.iter().enumerate() {
            let coef = r * scale;
            for (g, &xv) in grad[c * f..(c + 1) * f].iter_mut().zip(x) {
                *g += coef * f64::from(xv);
            }
        }
    }
    Ok((loss * scale, Gradient(grad)))
}

pub fn batch_gradient(w: &[f64], dataset: &Dataset, indices: &[usize]) -> Result<Gradient> {
    batch_loss_and_gradient(w, dataset, indices).map(|(_, g)| g)
}

/// Mean cross-entropy over `indices`.
pub fn batch_loss(w: &[f64], dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    check_dims(w, dataset)?;
    if indices.is_empty() {
        return Err(Error::State("loss over an empty batch".into()));
    }
    let f = dataset.n_features();
    let mut probs = vec![0.0; dataset.n_classes()];
    let total: f64 = indices
        .iter()
        .map(|&i| {
            let x = dataset.row(i);
            let y = dataset.label(i);
            softmax_row(w, x, &mut probs) - dot(&w[y * f..(y + 1) * f], x)
        })
        .sum();
    Ok(total / indices.len() as f64)
}

/// Draws a mini-batch of `batch_size` distinct samples of `device`.
pub fn sample_batch<R: Rng + ?Sized>(
    partition: &Partition,
    device: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if device >= partition.n_devices() {
        return Err(Error::invalid(format!(
            "device {device} out of range for {} devices",
            partition.n_devices()
        )));
    }
    let local = partition.indices(device);
    if local.is_empty() {
        return Err(Error::State(format!("device {device} holds no samples")));
    }
    if batch_size == 0 || batch_size > local.len() {
        return Err(Error::invalid(format!(
            "batch size {batch_size} not in 1..={} for device {device}",
            local.len()
        )));
    }
    Ok(index::sample(rng, local.len(), batch_size)
        .into_iter()
        .map(|j| local[j])
        .collect())
}

/// Mini-batch gradient `g_i = grad f_i(w; xi_i)` of one device.
pub fn local_gradient<R: Rng + ?Sized>(
    w: &[f64],
    dataset: &Dataset,
    partition: &Partition,
    device: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Gradient> {
    let batch = sample_batch(partition, device, batch_size, rng)?;
    batch_gradient(w, dataset, &batch)
}

/// Gradient of the local objective `f_i` over all samples of `device`.
pub fn full_gradient(
    w: &[f64],
    dataset: &Dataset,
    partition: &Partition,
    device: usize,
) -> Result<Gradient> {
    if device >= partition.n_devices() {
        return Err(Error::invalid(format!("device {device} out of range")));
    }
    batch_gradient(w, dataset, partition.indices(device))
}

/// Mean cross-entropy and argmax accuracy. Ties go to the lowest class index.
pub fn evaluate(w: &[f64], dataset: &Dataset) -> Result<Evaluation> {
    check_dims(w, dataset)?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let f = dataset.n_features();
    let k = dataset.n_classes();
    let mut logits = vec![0.0; k];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..dataset.len() {
        let x = dataset.row(i);
        for (c, l) in logits.iter_mut().enumerate() {
            *l = dot(&w[c * f..(c + 1) * f], x);
        }
        let mut best = 0;
        for c in 1..k {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        let max = logits[best];
        let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let y = dataset.label(i);
        loss += log_z - logits[y];
        if best == y {
            correct += 1;
        }
    }
    let n = dataset.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}
