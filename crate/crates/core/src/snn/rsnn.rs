//! Recurrent backend: the six pair patterns are played one delay column per
//! step into a recurrent LIF layer, followed by a 360-unit readout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{init_uniform, readout_backward, LifParams, OutputRates, Population, Readout, ReadoutKind, SpikeFn, Trace};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RsnnConfig {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    pub hidden: LifParams,
    pub readout: LifParams,
    pub readout_kind: ReadoutKind,
    /// Hidden biases start uniform in `[0, hidden_bias_init)`.
    pub hidden_bias_init: f64,
}

impl Default for RsnnConfig {
    fn default() -> Self {
        Self {
            n_in: 40,
            n_hidden: 128,
            n_out: super::N_AZIMUTHS,
            hidden: LifParams::default(),
            readout: LifParams::default(),
            readout_kind: ReadoutKind::Spiking,
            hidden_bias_init: 0.0,
        }
    }
}

/// Weight matrices are stored presynaptic-major: `w[pre * n_post + post]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RsnnParams {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    pub w_in: Vec<f64>,
    pub w_rec: Vec<f64>,
    pub b_hidden: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
    pub hidden: LifParams,
    pub readout: LifParams,
    pub readout_kind: ReadoutKind,
    /// Multiplies the raw pattern counts to give input currents.
    pub input_scale: f64,
}

#[derive(Debug, Clone)]
pub struct RsnnTrace {
    pub steps: usize,
    /// Scaled input currents, `steps × n_in`.
    pub input: Vec<f64>,
    pub hidden: Trace,
    pub readout: Option<Trace>,
    pub rates: OutputRates,
}

impl RsnnParams {
    pub fn init(config: &RsnnConfig, seed: u64) -> Result<Self> {
        config.hidden.validate()?;
        config.readout.validate()?;
        if config.n_in == 0 || config.n_hidden == 0 || config.n_out == 0 {
            return Err(invalid("network layers must be non-empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ni, nh, no) = (config.n_in, config.n_hidden, config.n_out);
        let w_in = init_uniform(&mut rng, ni * nh, ni);
        let w_rec = init_uniform(&mut rng, nh * nh, nh);
        let w_out = init_uniform(&mut rng, nh * no, nh);
        let b_hidden = (0..nh)
            .map(|_| {
                if config.hidden_bias_init > 0.0 {
                    rand::Rng::gen_range(&mut rng, 0.0..config.hidden_bias_init)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            n_in: ni,
            n_hidden: nh,
            n_out: no,
            w_in,
            w_rec,
            b_hidden,
            w_out,
            b_out: vec![0.0; no],
            hidden: config.hidden,
            readout: config.readout,
            readout_kind: config.readout_kind,
            input_scale: 1.0,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_in: vec![0.0; self.w_in.len()],
            w_rec: vec![0.0; self.w_rec.len()],
            b_hidden: vec![0.0; self.b_hidden.len()],
            w_out: vec![0.0; self.w_out.len()],
            b_out: vec![0.0; self.b_out.len()],
            ..self.clone()
        }
    }

    pub fn steps_for(&self, sequence: &[f64]) -> Result<usize> {
        if sequence.len() % self.n_in != 0 || sequence.is_empty() {
            return Err(Error::Dimension(format!(
                "sequence of {} values is not a whole number of {}-channel steps",
                sequence.len(),
                self.n_in
            )));
        }
        Ok(sequence.len() / self.n_in)
    }

    /// Run on a `steps × n_in` sequence of raw counts.
    pub fn run(&self, sequence: &[f64], mode: SpikeFn) -> Result<RsnnTrace> {
        let steps = self.steps_for(sequence)?;
        let (ni, nh, no) = (self.n_in, self.n_hidden, self.n_out);
        let input: Vec<f64> = sequence.iter().map(|c| c * self.input_scale).collect();
        let mut hidden = Population::new(nh, self.hidden, mode, steps);
        let leaky = self.readout_kind == ReadoutKind::Leaky;
        let mut readout = Readout::new(self.readout_kind, no, self.readout, mode, if leaky { 0 } else { steps });
        let mut i_h = vec![0.0; nh];
        let mut i_o = vec![0.0; no];
        let mut prev = vec![0.0; nh];
        for t in 0..steps {
            i_h.copy_from_slice(&self.b_hidden);
            for (k, &x) in input[t * ni..(t + 1) * ni].iter().enumerate() {
                if x != 0.0 {
                    axpy(x, &self.w_in[k * nh..(k + 1) * nh], &mut i_h);
                }
            }
            for (j, &z) in prev.iter().enumerate() {
                if z != 0.0 {
                    axpy(z, &self.w_rec[j * nh..(j + 1) * nh], &mut i_h);
                }
            }
            let z_h = hidden.step(&i_h);
            if leaky {
                prev.copy_from_slice(z_h);
                continue;
            }
            i_o.copy_from_slice(&self.b_out);
            for (j, &z) in z_h.iter().enumerate() {
                if z != 0.0 {
                    axpy(z, &self.w_out[j * no..(j + 1) * no], &mut i_o);
                }
            }
            prev.copy_from_slice(z_h);
            readout.step(&i_o);
        }
        let (rates, readout) = if leaky {
            (self.leaky_rates(&hidden.trace), None)
        } else {
            readout.finish(&self.readout, steps)
        };
        Ok(RsnnTrace {
            steps,
            input,
            hidden: hidden.trace,
            readout,
            rates,
        })
    }

    /// Accumulate into `grads` the gradient of a loss whose derivative with
    /// respect to the normalized rates is `g_rates`.
    pub fn backward(&self, trace: &RsnnTrace, g_rates: &[f64], grads: &mut RsnnParams) {
        let (ni, nh, no) = (self.n_in, self.n_hidden, self.n_out);
        let steps = trace.steps;
        if self.readout_kind == ReadoutKind::Leaky {
            return self.backward_leaky(trace, g_rates, grads);
        }
        let d_out = readout_backward(
            self.readout_kind,
            &self.readout,
            trace.readout.as_ref(),
            &trace.rates,
            g_rates,
        );
        // Transposed readout so that sparse output errors read contiguous rows.
        let mut w_out_t = vec![0.0; no * nh];
        for j in 0..nh {
            for o in 0..no {
                w_out_t[o * nh + j] = self.w_out[j * no + o];
            }
        }
        let mut g_z = vec![0.0; nh];
        let mut g_v = vec![0.0; nh];
        let mut d_h = vec![0.0; nh];
        let mut d_h_next = vec![0.0; nh];
        for t in (0..steps).rev() {
            let d_o = &d_out[t * no..(t + 1) * no];
            let z_h = trace.hidden.spikes_at(t);
            g_z.fill(0.0);
            for (o, &d) in d_o.iter().enumerate() {
                if d != 0.0 {
                    grads.b_out[o] += d;
                    axpy(d, &w_out_t[o * nh..(o + 1) * nh], &mut g_z);
                }
            }
            for (j, &z) in z_h.iter().enumerate() {
                if z != 0.0 {
                    axpy(z, d_o, &mut grads.w_out[j * no..(j + 1) * no]);
                }
            }
            self.hidden_step_backward(trace, t, &mut g_z, &mut g_v, &mut d_h, &d_h_next, grads, ni);
            std::mem::swap(&mut d_h, &mut d_h_next);
        }
    }

    /// Weight of a hidden spike at step `s` in the time-averaged leaky
    /// readout: `(1 - beta^(T - s)) / T`.
    fn leaky_weights(&self, steps: usize) -> Vec<f64> {
        let beta = self.readout.decay();
        (0..steps)
            .map(|s| (1.0 - beta.powi((steps - s) as i32)) / steps as f64)
            .collect()
    }

    /// The leaky readout is linear, so its time average is the readout
    /// weights applied to time-weighted hidden counts.
    fn leaky_rates(&self, hidden: &Trace) -> OutputRates {
        let (nh, no) = (self.n_hidden, self.n_out);
        let steps = hidden.steps();
        let c = self.leaky_weights(steps);
        let wc = weighted_counts(hidden, &c);
        let total: f64 = c.iter().sum();
        let mut rates: Vec<f64> = self.b_out.iter().map(|b| b * total).collect();
        for j in 0..nh {
            if wc[j] != 0.0 {
                axpy(wc[j], &self.w_out[j * no..(j + 1) * no], &mut rates);
            }
        }
        OutputRates {
            rates,
            steps,
            normalizer: 1.0,
        }
    }

    fn backward_leaky(&self, trace: &RsnnTrace, g_rates: &[f64], grads: &mut RsnnParams) {
        let (ni, nh, no) = (self.n_in, self.n_hidden, self.n_out);
        let steps = trace.steps;
        let c = self.leaky_weights(steps);
        let wc = weighted_counts(&trace.hidden, &c);
        let total: f64 = c.iter().sum();
        axpy(total, g_rates, &mut grads.b_out);
        let mut gw = vec![0.0; nh];
        for j in 0..nh {
            if wc[j] != 0.0 {
                axpy(wc[j], g_rates, &mut grads.w_out[j * no..(j + 1) * no]);
            }
            gw[j] = dot(&self.w_out[j * no..(j + 1) * no], g_rates);
        }
        let mut g_z = vec![0.0; nh];
        let mut g_v = vec![0.0; nh];
        let mut d_h = vec![0.0; nh];
        let mut d_h_next = vec![0.0; nh];
        for t in (0..steps).rev() {
            for (g, &w) in g_z.iter_mut().zip(&gw) {
                *g = c[t] * w;
            }
            self.hidden_step_backward(trace, t, &mut g_z, &mut g_v, &mut d_h, &d_h_next, grads, ni);
            std::mem::swap(&mut d_h, &mut d_h_next);
        }
    }

    /// Shared hidden-layer part of one reverse step. `g_z` holds the readout
    /// part of dL/dz[t] on entry.
    #[allow(clippy::too_many_arguments)]
    fn hidden_step_backward(
        &self,
        trace: &RsnnTrace,
        t: usize,
        g_z: &mut [f64],
        g_v: &mut [f64],
        d_h: &mut [f64],
        d_h_next: &[f64],
        grads: &mut RsnnParams,
        ni: usize,
    ) {
        let nh = self.n_hidden;
        if t + 1 < trace.steps {
            for (j, g) in g_z.iter_mut().enumerate() {
                *g += dot(&self.w_rec[j * nh..(j + 1) * nh], d_h_next);
            }
        }
        super::backward_step(&self.hidden, &trace.hidden, t, g_z, g_v, d_h);
        for (b, &d) in grads.b_hidden.iter_mut().zip(d_h.iter()) {
            *b += d;
        }
        for (k, &x) in trace.input[t * ni..(t + 1) * ni].iter().enumerate() {
            if x != 0.0 {
                axpy(x, d_h, &mut grads.w_in[k * nh..(k + 1) * nh]);
            }
        }
        if t > 0 {
            for (j, &z) in trace.hidden.spikes_at(t - 1).iter().enumerate() {
                if z != 0.0 {
                    axpy(z, d_h, &mut grads.w_rec[j * nh..(j + 1) * nh]);
                }
            }
        }
    }

    /// Choose `input_scale` so the mean nonzero input current equals half
    /// the hidden threshold on the given raw sequences.
    pub fn calibrate_input_scale(&mut self, sequences: &[Vec<f64>]) -> Result<f64> {
        let nh = self.n_hidden;
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut cur = vec![0.0; nh];
        for seq in sequences {
            self.steps_for(seq)?;
            for step in seq.chunks(self.n_in) {
                if step.iter().all(|&x| x == 0.0) {
                    continue;
                }
                cur.fill(0.0);
                for (k, &x) in step.iter().enumerate() {
                    if x != 0.0 {
                        axpy(x, &self.w_in[k * nh..(k + 1) * nh], &mut cur);
                    }
                }
                for &c in &cur {
                    if c != 0.0 {
                        sum += c.abs();
                        n += 1;
                    }
                }
            }
        }
        if n == 0 || sum == 0.0 {
            return Err(Error::NoActivity);
        }
        self.input_scale = self.hidden.threshold / 2.0 / (sum / n as f64);
        Ok(self.input_scale)
    }

    pub fn trainable(&self) -> [&[f64]; 5] {
        [&self.w_in, &self.w_rec, &self.b_hidden, &self.w_out, &self.b_out]
    }

    pub fn trainable_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.w_in,
            &mut self.w_rec,
            &mut self.b_hidden,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    /// Reorder hidden neurons so that new neuron `i` is old neuron `perm[i]`.
    pub fn permute_hidden(&self, perm: &[usize]) -> Self {
        let (ni, nh, no) = (self.n_in, self.n_hidden, self.n_out);
        let mut p = self.clone();
        for (i, &old) in perm.iter().enumerate() {
            p.b_hidden[i] = self.b_hidden[old];
            for k in 0..ni {
                p.w_in[k * nh + i] = self.w_in[k * nh + old];
            }
            for (j, &old_j) in perm.iter().enumerate() {
                p.w_rec[i * nh + j] = self.w_rec[old * nh + old_j];
            }
            p.w_out[i * no..(i + 1) * no].copy_from_slice(&self.w_out[old * no..(old + 1) * no]);
        }
        p
    }
}

fn weighted_counts(trace: &Trace, c: &[f64]) -> Vec<f64> {
    let mut wc = vec![0.0; trace.n];
    for (t, &ct) in c.iter().enumerate() {
        axpy(ct, trace.spikes_at(t), &mut wc);
    }
    wc
}

#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(seed: u64, kind: ReadoutKind) -> RsnnParams {
        let cfg = RsnnConfig {
            n_in: 2,
            n_hidden: 3,
            n_out: 2,
            hidden: LifParams::new(3.0, 1.0, 1.0, 0).unwrap(),
            readout: LifParams::new(3.0, 1.0, 1.0, 0).unwrap(),
            readout_kind: kind,
            hidden_bias_init: 0.5,
        };
        let mut p = RsnnParams::init(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        // Larger weights keep the relaxed units inside their sloped region.
        for w in p.w_in.iter_mut().chain(&mut p.w_out) {
            *w = rng.gen_range(-2.0..4.0);
        }
        for b in &mut p.b_out {
            *b = rng.gen_range(0.0..1.0);
        }
        p
    }

    fn relaxed_loss(p: &RsnnParams, seq: &[f64], label: &[f64]) -> f64 {
        let tr = p.run(seq, SpikeFn::Relaxed).unwrap();
        crate::snn::mse_loss(&tr.rates.normalized(), label).unwrap()
    }

    #[test]
    fn zero_pattern_zero_biases_gives_silence() {
        let cfg = RsnnConfig {
            n_hidden: 16,
            ..RsnnConfig::default()
        };
        let p = RsnnParams::init(&cfg, 3).unwrap();
        let tr = p.run(&vec![0.0; 40 * 306], SpikeFn::Heaviside).unwrap();
        assert_eq!(tr.rates.rates.len(), 360);
        assert!(tr.rates.rates.iter().all(|&r| r == 0.0));
        assert_eq!(tr.rates.normalizer, 153.0);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = RsnnConfig {
            n_hidden: 24,
            hidden_bias_init: 0.8,
            ..RsnnConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq: Vec<f64> = (0..40 * 306).map(|_| (rng.gen_range(0.0..1.0f64) < 0.1) as u8 as f64 * 3.0).collect();
        let a = RsnnParams::init(&cfg, 9).unwrap().run(&seq, SpikeFn::Heaviside).unwrap();
        let b = RsnnParams::init(&cfg, 9).unwrap().run(&seq, SpikeFn::Heaviside).unwrap();
        assert_eq!(a.rates, b.rates);
        assert!(a.rates.rates.iter().all(|&r| r <= 306.0));
    }

    #[test]
    fn hidden_activity_starts_no_earlier_than_input() {
        let cfg = RsnnConfig {
            n_hidden: 32,
            ..RsnnConfig::default()
        };
        let mut p = RsnnParams::init(&cfg, 4).unwrap();
        p.input_scale = 50.0;
        let onset = 120;
        let mut seq = vec![0.0; 40 * 306];
        for c in 0..40 {
            seq[onset * 40 + c] = 2.0;
        }
        let tr = p.run(&seq, SpikeFn::Heaviside).unwrap();
        let first = (0..306).find(|&t| tr.hidden.spikes_at(t).iter().any(|&z| z > 0.0));
        assert_eq!(first, Some(onset));
        // Step-by-step re-simulation of the hidden layer agrees.
        let mut state = crate::snn::LifState::new(32);
        let mut prev = vec![0.0; 32];
        for t in 0..306 {
            let mut cur = p.b_hidden.clone();
            for k in 0..40 {
                for i in 0..32 {
                    cur[i] += tr.input[t * 40 + k] * p.w_in[k * 32 + i];
                }
            }
            for j in 0..32 {
                for i in 0..32 {
                    cur[i] += prev[j] * p.w_rec[j * 32 + i];
                }
            }
            let (s, z) = crate::snn::lif_step(&state, &cur, &p.hidden).unwrap();
            for (a, b) in z.iter().zip(tr.hidden.spikes_at(t)) {
                assert_eq!(a, b, "step {t}");
            }
            state = s;
            prev = z;
        }
    }

    #[test]
    fn permuting_hidden_units_leaves_rates_unchanged() {
        let cfg = RsnnConfig {
            n_hidden: 20,
            hidden_bias_init: 1.2,
            ..RsnnConfig::default()
        };
        let mut p = RsnnParams::init(&cfg, 5).unwrap();
        p.input_scale = 0.7;
        for w in &mut p.w_out {
            *w *= 40.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq: Vec<f64> = (0..40 * 306).map(|_| rng.gen_range(0..3) as f64).collect();
        let mut perm: Vec<usize> = (0..20).collect();
        for i in (1..20).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let a = p.run(&seq, SpikeFn::Heaviside).unwrap();
        let b = p.permute_hidden(&perm).run(&seq, SpikeFn::Heaviside).unwrap();
        assert!(a.rates.rates.iter().any(|&r| r > 0.0));
        assert_eq!(a.rates, b.rates);
    }

    #[test]
    fn leaky_readout_matches_stepwise_integration() {
        let p = tiny(3, ReadoutKind::Leaky);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seq: Vec<f64> = (0..2 * 9).map(|_| rng.gen_range(0.0..2.0)).collect();
        let tr = p.run(&seq, SpikeFn::Heaviside).unwrap();
        let beta = p.readout.decay();
        let mut y = vec![0.0; 2];
        let mut mean = vec![0.0; 2];
        for t in 0..9 {
            let z = tr.hidden.spikes_at(t);
            for o in 0..2 {
                let mut cur = p.b_out[o];
                for j in 0..3 {
                    cur += z[j] * p.w_out[j * 2 + o];
                }
                y[o] = beta * y[o] + (1.0 - beta) * cur;
                mean[o] += y[o] / 9.0;
            }
        }
        for o in 0..2 {
            assert!((tr.rates.rates[o] - mean[o]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_ragged_sequence() {
        let p = RsnnParams::init(&RsnnConfig::default(), 0).unwrap();
        assert!(matches!(p.run(&[1.0; 41], SpikeFn::Heaviside), Err(Error::Dimension(_))));
        assert!(p.run(&[], SpikeFn::Heaviside).is_err());
    }

    #[test]
    fn relaxed_gradient_matches_finite_differences() {
        for kind in [ReadoutKind::Spiking, ReadoutKind::Leaky] {
            for seed in 0..5u64 {
                let p = tiny(seed, kind);
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let seq: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..3.0)).collect();
                let label = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
                let tr = p.run(&seq, SpikeFn::Relaxed).unwrap();
                let g_rates = crate::snn::mse_grad(&tr.rates.normalized(), &label).unwrap();
                let mut g = p.zeros_like();
                p.backward(&tr, &g_rates, &mut g);
                let h = 1e-6;
                for (ti, tensor) in g.trainable().iter().enumerate() {
                    for (k, &analytic) in tensor.iter().enumerate() {
                        let mut plus = p.clone();
                        plus.trainable_mut()[ti][k] += h;
                        let mut minus = p.clone();
                        minus.trainable_mut()[ti][k] -= h;
                        let fd = (relaxed_loss(&plus, &seq, &label) - relaxed_loss(&minus, &seq, &label)) / (2.0 * h);
                        let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                        assert!(err < 1e-4, "{kind:?} seed {seed} tensor {ti}[{k}]: {analytic} vs {fd}");
                    }
                }
            }
        }
    }
}
