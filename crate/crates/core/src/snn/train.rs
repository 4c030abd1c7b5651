use rayon::prelude::*;

use super::{Architecture, Checkpoint, CsnnParams, NamedTensor, OutputRates, RsnnParams, SpikeFn};
use crate::encoder::MultiPairPattern;
use crate::error::{invalid, Error, Result};

/// `(1/n) * sum (label - output)^2`.
pub fn mse_loss(output: &[f64], label: &[f64]) -> Result<f64> {
    check_lengths(output, label)?;
    let n = output.len() as f64;
    Ok(output.iter().zip(label).map(|(o, l)| (l - o) * (l - o)).sum::<f64>() / n)
}

/// Derivative of [`mse_loss`] with respect to `output`.
pub fn mse_grad(output: &[f64], label: &[f64]) -> Result<Vec<f64>> {
    check_lengths(output, label)?;
    let n = output.len() as f64;
    Ok(output.iter().zip(label).map(|(o, l)| 2.0 * (o - l) / n).collect())
}

fn check_lengths(output: &[f64], label: &[f64]) -> Result<()> {
    if output.len() != label.len() || output.is_empty() {
        return Err(Error::Dimension(format!(
            "output has {} values, label has {}",
            output.len(),
            label.len()
        )));
    }
    Ok(())
}

/// A network that maps a raw pattern volume to output rates and can
/// backpropagate a rate-space loss.
pub trait SpikingNet: Clone + Send + Sync {
    /// Raw input for [`forward`](Self::forward): the pattern's delay sequence.
    fn prepare(&self, pattern: &MultiPairPattern) -> Result<Vec<f64>> {
        Ok(pattern.delay_sequence())
    }

    fn forward(&self, input: &[f64]) -> Result<OutputRates>;

    /// Adds the MSE gradient for one sample to `grads` and returns the loss.
    fn loss_grad(&self, input: &[f64], label: &[f64], grads: &mut Self) -> Result<f64>;

    fn zeros_like(&self) -> Self;

    fn params(&self) -> Vec<&[f64]>;

    fn params_mut(&mut self) -> Vec<&mut [f64]>;
}

impl SpikingNet for RsnnParams {
    fn forward(&self, input: &[f64]) -> Result<OutputRates> {
        Ok(self.run(input, SpikeFn::Heaviside)?.rates)
    }

    fn loss_grad(&self, input: &[f64], label: &[f64], grads: &mut Self) -> Result<f64> {
        let tr = self.run(input, SpikeFn::Heaviside)?;
        let out = tr.rates.normalized();
        let loss = mse_loss(&out, label)?;
        self.backward(&tr, &mse_grad(&out, label)?, grads);
        Ok(loss)
    }

    fn zeros_like(&self) -> Self {
        RsnnParams::zeros_like(self)
    }

    fn params(&self) -> Vec<&[f64]> {
        self.trainable().to_vec()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.trainable_mut().into_iter().collect()
    }
}

impl SpikingNet for CsnnParams {
    fn forward(&self, input: &[f64]) -> Result<OutputRates> {
        Ok(self.run(input, SpikeFn::Heaviside)?.rates)
    }

    fn loss_grad(&self, input: &[f64], label: &[f64], grads: &mut Self) -> Result<f64> {
        let tr = self.run(input, SpikeFn::Heaviside)?;
        let out = tr.rates.normalized();
        let loss = mse_loss(&out, label)?;
        self.backward(&tr, &mse_grad(&out, label)?, grads);
        Ok(loss)
    }

    fn zeros_like(&self) -> Self {
        CsnnParams::zeros_like(self)
    }

    fn params(&self) -> Vec<&[f64]> {
        self.trainable()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.trainable_mut()
    }
}

/// Either backend, as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Rsnn(RsnnParams),
    Csnn(CsnnParams),
}

impl Network {
    pub fn architecture(&self) -> Architecture {
        match self {
            Network::Rsnn(_) => Architecture::Rsnn,
            Network::Csnn(_) => Architecture::Csnn,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            Network::Rsnn(p) => super::checkpoint::rsnn_to_checkpoint(p),
            Network::Csnn(p) => super::checkpoint::csnn_to_checkpoint(p),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match ck.architecture {
            Architecture::Rsnn => super::checkpoint::rsnn_from_checkpoint(ck).map(Network::Rsnn),
            Architecture::Csnn => super::checkpoint::csnn_from_checkpoint(ck).map(Network::Csnn),
        }
    }

    pub fn tensors(&self) -> Vec<NamedTensor> {
        self.to_checkpoint().tensors
    }
}

impl SpikingNet for Network {
    fn forward(&self, input: &[f64]) -> Result<OutputRates> {
        match self {
            Network::Rsnn(p) => p.forward(input),
            Network::Csnn(p) => p.forward(input),
        }
    }

    fn loss_grad(&self, input: &[f64], label: &[f64], grads: &mut Self) -> Result<f64> {
        match (self, grads) {
            (Network::Rsnn(p), Network::Rsnn(g)) => p.loss_grad(input, label, g),
            (Network::Csnn(p), Network::Csnn(g)) => p.loss_grad(input, label, g),
            _ => Err(invalid("gradient buffer has a different architecture")),
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            Network::Rsnn(p) => Network::Rsnn(p.zeros_like()),
            Network::Csnn(p) => Network::Csnn(CsnnParams::zeros_like(p)),
        }
    }

    fn params(&self) -> Vec<&[f64]> {
        match self {
            Network::Rsnn(p) => SpikingNet::params(p),
            Network::Csnn(p) => SpikingNet::params(p),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Network::Rsnn(p) => SpikingNet::params_mut(p),
            Network::Csnn(p) => SpikingNet::params_mut(p),
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension("parameter and gradient lists differ".into()));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != grads.len() || self.m.iter().zip(&grads).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::Dimension("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One optimizer step on the mean loss of `batch`, given as
/// `(prepared input, label)` pairs. Per-sample gradients may be computed in
/// parallel but are summed in batch order. On a non-finite loss or gradient
/// the model and optimizer are left untouched.
pub fn bptt_update<M: SpikingNet>(
    batch: &[(&[f64], &[f64])],
    model: &mut M,
    opt: &mut Adam,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let shared: &M = model;
    let per_sample: Vec<Result<(f64, M)>> = batch
        .par_iter()
        .map(|(x, label)| {
            let mut g = shared.zeros_like();
            let loss = shared.loss_grad(x, label, &mut g)?;
            Ok((loss, g))
        })
        .collect();
    let mut total = model.zeros_like();
    let mut loss = 0.0;
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        for (acc, part) in total.params_mut().into_iter().zip(g.params()) {
            for (a, b) in acc.iter_mut().zip(part) {
                *a += b;
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    loss *= scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {loss}")));
    }
    for t in total.params_mut() {
        for g in t.iter_mut() {
            *g *= scale;
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
    }
    opt.update(model.params_mut(), total.params(), lr)?;
    Ok(loss)
}
