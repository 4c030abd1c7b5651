//! Leaky integrate-and-fire networks trained by backpropagation through time.
//!
//! The membrane follows `tau dV/dt = -V + I`, discretized with the exact
//! exponential step for `dt`:
//!
//! ```text
//! u[t] = beta * v[t-1] + (1 - beta) * I[t]     beta = exp(-dt / tau)
//! z[t] = H(u[t] - threshold)
//! v[t] = u[t] * (1 - z[t])
//! ```
//!
//! A neuron that spikes sits out the next `refractory_steps` steps with its
//! potential held at zero. Gradients replace `dH/du` by the triangular
//! pseudo-derivative of [`surrogate_grad`].

mod checkpoint;
mod csnn;
mod rsnn;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, Architecture, Checkpoint, NamedTensor};
pub use csnn::{conv_out_len, Conv2d, CsnnConfig, CsnnParams, CsnnTrace, CONV_CHANNELS};
pub use rsnn::{RsnnConfig, RsnnParams, RsnnTrace};
pub use train::{bptt_update, mse_grad, mse_loss, Adam, Network, SpikingNet};

use crate::error::{invalid, Error, Result};

/// Output units, one per integer azimuth degree.
pub const N_AZIMUTHS: usize = 360;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    /// Membrane time constant in steps.
    pub tau_m: f64,
    pub threshold: f64,
    pub dt: f64,
    pub refractory_steps: u32,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau_m: 20.0,
            threshold: 1.0,
            dt: 1.0,
            refractory_steps: 1,
        }
    }
}

impl LifParams {
    pub fn new(tau_m: f64, threshold: f64, dt: f64, refractory_steps: u32) -> Result<Self> {
        let p = Self {
            tau_m,
            threshold,
            dt,
            refractory_steps,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_m > 0.0 && self.tau_m.is_finite()) {
            return Err(invalid(format!("tau_m must be positive, got {}", self.tau_m)));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(invalid(format!("threshold must be positive, got {}", self.threshold)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }

    pub fn decay(&self) -> f64 {
        (-self.dt / self.tau_m).exp()
    }

    /// Most spikes one neuron can emit in `steps` steps.
    pub fn max_count(&self, steps: usize) -> usize {
        steps.div_ceil(self.refractory_steps as usize + 1)
    }
}

/// `max(0, 1 - |(v - threshold) / threshold|)`.
pub fn surrogate_grad(v: f64, threshold: f64) -> f64 {
    (1.0 - ((v - threshold) / threshold).abs()).max(0.0)
}

/// Antiderivative of [`surrogate_grad`]: a C1 ramp from 0 (at `v <= 0`) to
/// `threshold` (at `v >= 2 threshold`).
pub fn relaxed_spike(v: f64, threshold: f64) -> f64 {
    if v <= 0.0 {
        0.0
    } else if v <= threshold {
        v * v / (2.0 * threshold)
    } else if v < 2.0 * threshold {
        let d = v - threshold;
        threshold / 2.0 + d - d * d / (2.0 * threshold)
    } else {
        threshold
    }
}

/// How the forward pass turns a potential into an output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeFn {
    /// Binary spikes with reset and refractoriness.
    #[default]
    Heaviside,
    /// `z = relaxed_spike(u)` and no refractory period. Differentiable, so
    /// finite differences of it check the backward pass.
    Relaxed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifState {
    pub potentials: Vec<f64>,
    pub refractory: Vec<u32>,
}

impl LifState {
    pub fn new(n: usize) -> Self {
        Self {
            potentials: vec![0.0; n],
            refractory: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.potentials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.potentials.is_empty()
    }
}

/// Advance every neuron by one step. Returns the new state and the spikes.
pub fn lif_step(state: &LifState, current: &[f64], params: &LifParams) -> Result<(LifState, Vec<f64>)> {
    params.validate()?;
    if current.len() != state.len() || state.refractory.len() != state.len() {
        return Err(Error::Dimension(format!(
            "{} currents for {} neurons",
            current.len(),
            state.len()
        )));
    }
    if let Some(i) = current.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite(format!("input current {i} is {}", current[i])));
    }
    let mut next = state.clone();
    let mut spikes = vec![0.0; state.len()];
    let beta = params.decay();
    for i in 0..state.len() {
        let (_, z, _) = update(
            &mut next.potentials[i],
            &mut next.refractory[i],
            current[i],
            beta,
            params,
            SpikeFn::Heaviside,
        );
        spikes[i] = z;
    }
    Ok((next, spikes))
}

/// One neuron update; returns `(u, z, active)`.
#[inline]
fn update(v: &mut f64, refr: &mut u32, current: f64, beta: f64, p: &LifParams, mode: SpikeFn) -> (f64, f64, bool) {
    match mode {
        SpikeFn::Heaviside => {
            if *refr > 0 {
                *refr -= 1;
                *v = 0.0;
                return (0.0, 0.0, false);
            }
            let u = beta * *v + (1.0 - beta) * current;
            if u >= p.threshold {
                *v = 0.0;
                *refr = p.refractory_steps;
                (u, 1.0, true)
            } else {
                *v = u;
                (u, 0.0, true)
            }
        }
        SpikeFn::Relaxed => {
            let u = beta * *v + (1.0 - beta) * current;
            let z = relaxed_spike(u, p.threshold);
            *v = u * (1.0 - z);
            (u, z, true)
        }
    }
}

/// Per-step record of one population, step-major.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub n: usize,
    pub u: Vec<f64>,
    pub z: Vec<f64>,
    pub active: Vec<bool>,
}

impl Trace {
    fn with_capacity(n: usize, steps: usize) -> Self {
        Self {
            n,
            u: Vec::with_capacity(n * steps),
            z: Vec::with_capacity(n * steps),
            active: Vec::with_capacity(n * steps),
        }
    }

    pub fn steps(&self) -> usize {
        if self.n == 0 {
            0
        } else {
            self.z.len() / self.n
        }
    }

    pub fn spikes_at(&self, t: usize) -> &[f64] {
        &self.z[t * self.n..(t + 1) * self.n]
    }

    /// Spike count of every neuron over the whole trace.
    pub fn counts(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.n];
        for row in self.z.chunks(self.n.max(1)) {
            for (a, &z) in c.iter_mut().zip(row) {
                *a += z;
            }
        }
        c
    }
}

/// A layer of LIF neurons that records everything the backward pass needs.
#[derive(Debug, Clone)]
pub(crate) struct Population {
    params: LifParams,
    beta: f64,
    mode: SpikeFn,
    v: Vec<f64>,
    refr: Vec<u32>,
    pub(crate) trace: Trace,
}

impl Population {
    pub(crate) fn new(n: usize, params: LifParams, mode: SpikeFn, steps: usize) -> Self {
        Self {
            params,
            beta: params.decay(),
            mode,
            v: vec![0.0; n],
            refr: vec![0; n],
            trace: Trace::with_capacity(n, steps),
        }
    }

    /// Step with `current`; the spikes are the last row of the trace.
    pub(crate) fn step(&mut self, current: &[f64]) -> &[f64] {
        let n = self.v.len();
        for i in 0..n {
            let (u, z, active) = update(
                &mut self.v[i],
                &mut self.refr[i],
                current[i],
                self.beta,
                &self.params,
                self.mode,
            );
            self.trace.u.push(u);
            self.trace.z.push(z);
            self.trace.active.push(active);
        }
        let t = self.trace.steps() - 1;
        self.trace.spikes_at(t)
    }
}

/// Reverse one step of a traced population.
///
/// `g_z` is dL/dz at step `t`, `g_v` carries dL/dv[t] in and dL/dv[t-1] out,
/// and `d_current` receives dL/dI[t].
pub(crate) fn backward_step(
    params: &LifParams,
    trace: &Trace,
    t: usize,
    g_z: &[f64],
    g_v: &mut [f64],
    d_current: &mut [f64],
) {
    let beta = params.decay();
    let n = trace.n;
    let base = t * n;
    for i in 0..n {
        if !trace.active[base + i] {
            d_current[i] = 0.0;
            g_v[i] = 0.0;
            continue;
        }
        let u = trace.u[base + i];
        let z = trace.z[base + i];
        let s = surrogate_grad(u, params.threshold);
        let du = g_z[i] * s + g_v[i] * ((1.0 - z) - u * s);
        d_current[i] = (1.0 - beta) * du;
        g_v[i] = beta * du;
    }
}

/// Non-spiking readout `y[t] = beta y[t-1] + (1 - beta) I[t]`, reported as
/// the time average of `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReadoutKind {
    #[default]
    Spiking,
    Leaky,
}

impl std::str::FromStr for ReadoutKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spiking" | "lif" => Ok(Self::Spiking),
            "leaky" | "li" => Ok(Self::Leaky),
            other => Err(Error::Config(format!("unknown readout {other:?}"))),
        }
    }
}

impl std::fmt::Display for ReadoutKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Spiking => "spiking",
            Self::Leaky => "leaky",
        })
    }
}

/// Readout population of either kind.
#[derive(Debug, Clone)]
pub(crate) enum Readout {
    Spiking(Population),
    Leaky { beta: f64, y: Vec<f64>, history: Vec<f64> },
}

impl Readout {
    pub(crate) fn new(kind: ReadoutKind, n: usize, params: LifParams, mode: SpikeFn, steps: usize) -> Self {
        match kind {
            ReadoutKind::Spiking => Readout::Spiking(Population::new(n, params, mode, steps)),
            ReadoutKind::Leaky => Readout::Leaky {
                beta: params.decay(),
                y: vec![0.0; n],
                history: Vec::with_capacity(n * steps),
            },
        }
    }

    pub(crate) fn step(&mut self, current: &[f64]) {
        match self {
            Readout::Spiking(p) => {
                p.step(current);
            }
            Readout::Leaky { beta, y, history } => {
                for (yi, &c) in y.iter_mut().zip(current) {
                    *yi = *beta * *yi + (1.0 - *beta) * c;
                }
                history.extend_from_slice(y);
            }
        }
    }

    pub(crate) fn finish(self, params: &LifParams, steps: usize) -> (OutputRates, Option<Trace>) {
        match self {
            Readout::Spiking(p) => {
                let rates = p.trace.counts();
                let normalizer = params.max_count(steps).max(1) as f64;
                (
                    OutputRates {
                        rates,
                        steps,
                        normalizer,
                    },
                    Some(p.trace),
                )
            }
            Readout::Leaky { y, history, .. } => {
                let n = y.len();
                let mut rates = vec![0.0; n];
                for row in history.chunks(n.max(1)) {
                    for (r, &v) in rates.iter_mut().zip(row) {
                        *r += v;
                    }
                }
                for r in &mut rates {
                    *r /= steps.max(1) as f64;
                }
                (
                    OutputRates {
                        rates,
                        steps,
                        normalizer: 1.0,
                    },
                    None,
                )
            }
        }
    }
}

/// Gradient of the loss with respect to the readout currents, one row per
/// step, given dL/d(normalized rate).
pub(crate) fn readout_backward(
    kind: ReadoutKind,
    params: &LifParams,
    trace: Option<&Trace>,
    rates: &OutputRates,
    g_rates: &[f64],
) -> Vec<f64> {
    let n = g_rates.len();
    let steps = rates.steps;
    let mut d_current = vec![0.0; n * steps];
    match kind {
        ReadoutKind::Spiking => {
            let trace = trace.expect("spiking readout keeps a trace");
            let g_z: Vec<f64> = g_rates.iter().map(|g| g / rates.normalizer).collect();
            let mut g_v = vec![0.0; n];
            for t in (0..steps).rev() {
                backward_step(params, trace, t, &g_z, &mut g_v, &mut d_current[t * n..(t + 1) * n]);
            }
        }
        ReadoutKind::Leaky => {
            let beta = params.decay();
            let mut g_y = vec![0.0; n];
            for t in (0..steps).rev() {
                for i in 0..n {
                    g_y[i] = g_rates[i] / steps as f64 + beta * g_y[i];
                    d_current[t * n + i] = (1.0 - beta) * g_y[i];
                }
            }
        }
    }
    d_current
}

/// Readout activity of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputRates {
    /// Spike counts (spiking readout) or mean potential (leaky readout).
    pub rates: Vec<f64>,
    pub steps: usize,
    /// Largest attainable rate; `normalized()` divides by it.
    pub normalizer: f64,
}

impl OutputRates {
    pub fn normalized(&self) -> Vec<f64> {
        self.rates.iter().map(|r| r / self.normalizer).collect()
    }
}

/// Zero-mean uniform weights with variance `1 / fan_in`.
pub(crate) fn init_uniform(rng: &mut impl rand::Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let a = (3.0 / fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-a..a)).collect()
}
