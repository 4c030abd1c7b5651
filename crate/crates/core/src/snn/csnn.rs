//! Convolutional backend: the six pair patterns stacked as a
//! `pair × delay × channel` volume, presented as a constant current for a
//! fixed number of steps to four strided spiking convolutions, a spiking
//! fully connected layer and the readout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::rsnn::{axpy, dot};
use super::{init_uniform, readout_backward, LifParams, OutputRates, Population, Readout, ReadoutKind, SpikeFn, Trace};
use crate::error::{invalid, Error, Result};

pub const CONV_CHANNELS: [usize; 4] = [12, 24, 48, 96];
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Output length of a kernel-3, stride-2, padding-1 convolution.
pub fn conv_out_len(n: usize) -> usize {
    (n + 2 * PAD - KERNEL) / STRIDE + 1
}

/// 3×3 convolution with stride 2 and zero padding 1 on `c × h × w` volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    /// `out_c × in_c × 3 × 3`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    fn init(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, in_h: usize, in_w: usize) -> Self {
        let fan_in = in_c * KERNEL * KERNEL;
        Self {
            in_c,
            out_c,
            in_h,
            in_w,
            weight: init_uniform(rng, out_c * fan_in, fan_in),
            bias: vec![0.0; out_c],
        }
    }

    pub fn out_h(&self) -> usize {
        conv_out_len(self.in_h)
    }

    pub fn out_w(&self) -> usize {
        conv_out_len(self.in_w)
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h() * self.out_w()
    }

    /// Calls `f(out_index, in_index, weight_index)` for every tap that lands
    /// inside the input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for oc in 0..self.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (oc * oh + oy) * ow + ox;
                    for ic in 0..self.in_c {
                        for ky in 0..KERNEL {
                            let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                            if iy < 0 || iy >= self.in_h as isize {
                                continue;
                            }
                            for kx in 0..KERNEL {
                                let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                                if ix < 0 || ix >= self.in_w as isize {
                                    continue;
                                }
                                let i = (ic * self.in_h + iy as usize) * self.in_w + ix as usize;
                                let w = ((oc * self.in_c + ic) * KERNEL + ky) * KERNEL + kx;
                                f(o, i, w);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64], out: &mut [f64]) {
        let plane = self.out_h() * self.out_w();
        for (oc, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(self.bias[oc]);
        }
        if input.iter().all(|&x| x == 0.0) {
            return;
        }
        self.for_each_tap(|o, i, w| {
            out[o] += self.weight[w] * input[i];
        });
    }

    /// Accumulate weight and bias gradients and, when asked, the input gradient.
    pub fn backward(&self, input: &[f64], d_out: &[f64], d_in: Option<&mut [f64]>, d_w: &mut [f64], d_b: &mut [f64]) {
        let plane = self.out_h() * self.out_w();
        for (oc, chunk) in d_out.chunks(plane).enumerate() {
            d_b[oc] += chunk.iter().sum::<f64>();
        }
        match d_in {
            Some(d_in) => self.for_each_tap(|o, i, w| {
                d_w[w] += d_out[o] * input[i];
                d_in[i] += d_out[o] * self.weight[w];
            }),
            None => self.for_each_tap(|o, i, w| {
                d_w[w] += d_out[o] * input[i];
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsnnConfig {
    pub n_pairs: usize,
    pub n_delays: usize,
    pub n_channels: usize,
    pub conv_channels: [usize; 4],
    pub fc: usize,
    pub n_out: usize,
    pub steps: usize,
    pub lif: LifParams,
    pub readout: LifParams,
    pub readout_kind: ReadoutKind,
}

impl Default for CsnnConfig {
    fn default() -> Self {
        Self {
            n_pairs: 6,
            n_delays: 51,
            n_channels: 40,
            conv_channels: CONV_CHANNELS,
            fc: 512,
            n_out: super::N_AZIMUTHS,
            steps: 10,
            lif: LifParams {
                tau_m: 3.0,
                ..LifParams::default()
            },
            readout: LifParams {
                tau_m: 3.0,
                ..LifParams::default()
            },
            readout_kind: ReadoutKind::Spiking,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsnnParams {
    pub convs: Vec<Conv2d>,
    pub fc_in: usize,
    pub fc: usize,
    pub n_out: usize,
    /// `fc_in × fc`, presynaptic-major.
    pub w_fc: Vec<f64>,
    pub b_fc: Vec<f64>,
    /// `fc × n_out`.
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
    pub steps: usize,
    pub lif: LifParams,
    pub readout: LifParams,
    pub readout_kind: ReadoutKind,
    /// Counts are divided by this and clamped to `[0, 1]`.
    pub input_norm: f64,
}

#[derive(Debug, Clone)]
pub struct CsnnTrace {
    pub input: Vec<f64>,
    pub conv: Vec<Trace>,
    pub fc: Trace,
    pub readout: Option<Trace>,
    pub rates: OutputRates,
}

impl CsnnParams {
    pub fn init(config: &CsnnConfig, seed: u64) -> Result<Self> {
        config.lif.validate()?;
        config.readout.validate()?;
        if config.steps == 0 || config.n_out == 0 || config.fc == 0 {
            return Err(invalid("steps, fc and readout sizes must be positive"));
        }
        if config.n_pairs == 0 || config.n_delays == 0 || config.n_channels == 0 {
            return Err(invalid("input volume must be non-empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(CONV_CHANNELS.len());
        let (mut c, mut h, mut w) = (config.n_pairs, config.n_delays, config.n_channels);
        for &oc in &config.conv_channels {
            let conv = Conv2d::init(&mut rng, c, oc, h, w);
            (c, h, w) = (oc, conv.out_h(), conv.out_w());
            convs.push(conv);
        }
        let fc_in = c * h * w;
        Ok(Self {
            convs,
            fc_in,
            fc: config.fc,
            n_out: config.n_out,
            w_fc: init_uniform(&mut rng, fc_in * config.fc, fc_in),
            b_fc: vec![0.0; config.fc],
            w_out: init_uniform(&mut rng, config.fc * config.n_out, config.fc),
            b_out: vec![0.0; config.n_out],
            steps: config.steps,
            lif: config.lif,
            readout: config.readout,
            readout_kind: config.readout_kind,
            input_norm: 1.0,
        })
    }

    pub fn input_len(&self) -> usize {
        self.convs[0].in_len()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.trainable_mut() {
            t.fill(0.0);
        }
        z
    }

    /// `c × h × w` spatial shape of every stage output, input first.
    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        let first = &self.convs[0];
        let mut v = vec![(first.in_c, first.in_h, first.in_w)];
        v.extend(self.convs.iter().map(|c| (c.out_c, c.out_h(), c.out_w())));
        v
    }

    /// Normalize raw counts into input currents.
    pub fn normalize(&self, counts: &[f64]) -> Vec<f64> {
        counts
            .iter()
            .map(|&c| (c / self.input_norm).clamp(0.0, 1.0))
            .collect()
    }

    /// Set `input_norm` to the 95th percentile of the nonzero counts.
    pub fn calibrate_input_norm(&mut self, volumes: &[Vec<f64>]) -> f64 {
        let mut nz: Vec<f64> = volumes.iter().flatten().copied().filter(|&c| c > 0.0).collect();
        self.input_norm = if nz.is_empty() {
            1.0
        } else {
            nz.sort_by(f64::total_cmp);
            let idx = ((nz.len() as f64 * 0.95).ceil() as usize).clamp(1, nz.len()) - 1;
            nz[idx]
        };
        self.input_norm
    }

    /// Run on a raw-count volume.
    pub fn run(&self, counts: &[f64], mode: SpikeFn) -> Result<CsnnTrace> {
        if counts.len() != self.input_len() {
            return Err(Error::Dimension(format!(
                "volume of {} values, expected {} = {:?}",
                counts.len(),
                self.input_len(),
                self.stage_shapes()[0]
            )));
        }
        self.run_steps(counts, self.steps, mode)
    }

    pub fn run_steps(&self, counts: &[f64], steps: usize, mode: SpikeFn) -> Result<CsnnTrace> {
        let input = self.normalize(counts);
        let mut first = vec![0.0; self.convs[0].out_len()];
        self.convs[0].forward(&input, &mut first);
        let mut pops: Vec<Population> = self
            .convs
            .iter()
            .map(|c| Population::new(c.out_len(), self.lif, mode, steps))
            .collect();
        let mut fc = Population::new(self.fc, self.lif, mode, steps);
        let mut readout = Readout::new(self.readout_kind, self.n_out, self.readout, mode, steps);
        let mut bufs: Vec<Vec<f64>> = self.convs.iter().map(|c| vec![0.0; c.out_len()]).collect();
        let mut i_fc = vec![0.0; self.fc];
        let mut i_o = vec![0.0; self.n_out];
        for _ in 0..steps {
            let mut z = pops[0].step(&first).to_vec();
            for l in 1..self.convs.len() {
                self.convs[l].forward(&z, &mut bufs[l]);
                z = pops[l].step(&bufs[l]).to_vec();
            }
            i_fc.copy_from_slice(&self.b_fc);
            for (k, &s) in z.iter().enumerate() {
                if s != 0.0 {
                    axpy(s, &self.w_fc[k * self.fc..(k + 1) * self.fc], &mut i_fc);
                }
            }
            let z_fc = fc.step(&i_fc);
            i_o.copy_from_slice(&self.b_out);
            for (j, &s) in z_fc.iter().enumerate() {
                if s != 0.0 {
                    axpy(s, &self.w_out[j * self.n_out..(j + 1) * self.n_out], &mut i_o);
                }
            }
            readout.step(&i_o);
        }
        let (rates, readout) = readout.finish(&self.readout, steps);
        Ok(CsnnTrace {
            input,
            conv: pops.into_iter().map(|p| p.trace).collect(),
            fc: fc.trace,
            readout,
            rates,
        })
    }

    pub fn backward(&self, trace: &CsnnTrace, g_rates: &[f64], grads: &mut CsnnParams) {
        let steps = trace.rates.steps;
        let (nf, no) = (self.fc, self.n_out);
        let d_out = readout_backward(
            self.readout_kind,
            &self.readout,
            trace.readout.as_ref(),
            &trace.rates,
            g_rates,
        );
        // Readout -> fc spikes.
        let mut g_fc = vec![0.0; steps * nf];
        for t in 0..steps {
            let d_o = &d_out[t * no..(t + 1) * no];
            for (o, &d) in d_o.iter().enumerate() {
                grads.b_out[o] += d;
            }
            let z = trace.fc.spikes_at(t);
            for j in 0..nf {
                if z[j] != 0.0 {
                    axpy(z[j], d_o, &mut grads.w_out[j * no..(j + 1) * no]);
                }
                g_fc[t * nf + j] = dot(&self.w_out[j * no..(j + 1) * no], d_o);
            }
        }
        // fc currents -> last conv spikes.
        let d_fc = layer_backward(&self.lif, &trace.fc, &g_fc);
        let last = self.convs.len() - 1;
        let n_last = self.convs[last].out_len();
        let mut g_prev = vec![0.0; steps * n_last];
        for t in 0..steps {
            let d = &d_fc[t * nf..(t + 1) * nf];
            for (b, &x) in grads.b_fc.iter_mut().zip(d) {
                *b += x;
            }
            let z = trace.conv[last].spikes_at(t);
            for k in 0..n_last {
                if z[k] != 0.0 {
                    axpy(z[k], d, &mut grads.w_fc[k * nf..(k + 1) * nf]);
                }
                g_prev[t * n_last + k] = dot(&self.w_fc[k * nf..(k + 1) * nf], d);
            }
        }
        for l in (0..self.convs.len()).rev() {
            let conv = &self.convs[l];
            let d_cur = layer_backward(&self.lif, &trace.conv[l], &g_prev);
            let (gw, gb) = {
                let g = &mut grads.convs[l];
                (&mut g.weight, &mut g.bias)
            };
            let (no_l, ni_l) = (conv.out_len(), conv.in_len());
            if l == 0 {
                let mut total = vec![0.0; no_l];
                for row in d_cur.chunks(no_l) {
                    for (a, &b) in total.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                conv.backward(&trace.input, &total, None, gw, gb);
            } else {
                let mut g_in = vec![0.0; steps * ni_l];
                for t in 0..steps {
                    conv.backward(
                        trace.conv[l - 1].spikes_at(t),
                        &d_cur[t * no_l..(t + 1) * no_l],
                        Some(&mut g_in[t * ni_l..(t + 1) * ni_l]),
                        gw,
                        gb,
                    );
                }
                g_prev = g_in;
            }
        }
    }

    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for c in &self.convs {
            v.push(&c.weight);
            v.push(&c.bias);
        }
        v.extend([&self.w_fc[..], &self.b_fc[..], &self.w_out[..], &self.b_out[..]]);
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.convs {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v.push(&mut self.w_fc);
        v.push(&mut self.b_fc);
        v.push(&mut self.w_out);
        v.push(&mut self.b_out);
        v
    }
}

/// Backward through a feed-forward population given dL/dz for every step.
fn layer_backward(params: &LifParams, trace: &Trace, g_z: &[f64]) -> Vec<f64> {
    let n = trace.n;
    let steps = trace.steps();
    let mut d = vec![0.0; n * steps];
    let mut g_v = vec![0.0; n];
    for t in (0..steps).rev() {
        super::backward_step(params, trace, t, &g_z[t * n..(t + 1) * n], &mut g_v, &mut d[t * n..(t + 1) * n]);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn stage_shapes_for_the_default_volume() {
        let p = CsnnParams::init(&CsnnConfig::default(), 0).unwrap();
        let shapes = p.stage_shapes();
        assert_eq!(
            shapes,
            vec![(6, 51, 40), (12, 26, 20), (24, 13, 10), (48, 7, 5), (96, 4, 3)]
        );
        assert_eq!(p.fc_in, 96 * 4 * 3);
        assert_eq!(conv_out_len(11), 6);
        assert_eq!(conv_out_len(1), 1);
    }

    #[test]
    fn zero_input_gives_silence() {
        let p = CsnnParams::init(&CsnnConfig::default(), 1).unwrap();
        let tr = p.run(&vec![0.0; p.input_len()], SpikeFn::Heaviside).unwrap();
        assert_eq!(tr.rates.rates.len(), 360);
        assert!(tr.rates.rates.iter().all(|&r| r == 0.0));
        assert!(p.run(&[0.0; 10], SpikeFn::Heaviside).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let conv = Conv2d::init(&mut rng, 2, 3, 5, 4);
        let x: Vec<f64> = (0..conv.in_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut y = vec![0.0; conv.out_len()];
        conv.forward(&x, &mut y);
        let (oh, ow) = (conv.out_h(), conv.out_w());
        assert_eq!((oh, ow), (3, 2));
        let at = |c: usize, r: isize, q: isize| -> f64 {
            if r < 0 || q < 0 || r >= 5 || q >= 4 {
                0.0
            } else {
                x[(c * 5 + r as usize) * 4 + q as usize]
            }
        };
        for oc in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = conv.bias[oc];
                    for ic in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let w = conv.weight[((oc * 2 + ic) * 3 + ky) * 3 + kx];
                                s += w * at(ic, (2 * oy + ky) as isize - 1, (2 * ox + kx) as isize - 1);
                            }
                        }
                    }
                    assert!((s - y[(oc * oh + oy) * ow + ox]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn longer_horizon_extends_the_shorter_one() {
        let mut p = CsnnParams::init(&CsnnConfig::default(), 2).unwrap();
        for t in p.trainable_mut() {
            for w in t.iter_mut() {
                *w *= 3.0;
            }
        }
        // Biases near threshold keep the deeper stages active.
        for c in &mut p.convs {
            c.bias.fill(0.9);
        }
        p.b_fc.fill(0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..p.input_len()).map(|_| (rng.gen_range(0..10) / 7) as f64).collect();
        let short = p.run_steps(&x, 10, SpikeFn::Heaviside).unwrap();
        let long = p.run_steps(&x, 20, SpikeFn::Heaviside).unwrap();
        assert!(long.rates.rates.iter().any(|&r| r > 0.0));
        let bound = p.readout.max_count(10) as f64;
        for (a, b) in short.rates.rates.iter().zip(&long.rates.rates) {
            assert!(b >= a);
            // The extra steps add at most one horizon's worth of spikes.
            assert!(b - a <= bound);
            assert!(*b <= 2.0 * bound);
        }
    }

    #[test]
    fn p95_normalization() {
        let mut p = CsnnParams::init(&CsnnConfig::default(), 0).unwrap();
        let vol: Vec<f64> = (0..100).map(|i| (i % 21) as f64).collect();
        let norm = p.calibrate_input_norm(&[vol]);
        // Nonzero values are 95 draws from 1..=20 (each 4 or 5 times); the
        // 95th percentile of the sorted list by direct enumeration:
        let mut nz: Vec<f64> = (0..100).map(|i| (i % 21) as f64).filter(|&c| c > 0.0).collect();
        nz.sort_by(f64::total_cmp);
        assert_eq!(norm, nz[(0.95f64 * nz.len() as f64).ceil() as usize - 1]);
        let x = p.normalize(&[0.0, norm / 2.0, 3.0 * norm]);
        assert_eq!(x, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn relaxed_gradient_matches_finite_differences() {
        let cfg = CsnnConfig {
            n_pairs: 2,
            n_delays: 5,
            n_channels: 4,
            conv_channels: [3, 4, 3, 2],
            fc: 4,
            n_out: 3,
            steps: 3,
            lif: LifParams::new(2.0, 1.0, 1.0, 0).unwrap(),
            readout: LifParams::new(2.0, 1.0, 1.0, 0).unwrap(),
            readout_kind: ReadoutKind::Spiking,
        };
        let mut p = CsnnParams::init(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for t in p.trainable_mut() {
            for w in t.iter_mut() {
                *w = rng.gen_range(-0.6..1.2);
            }
        }
        p.input_norm = 2.0;
        let x: Vec<f64> = (0..p.input_len()).map(|_| rng.gen_range(0.0..2.0)).collect();
        let label = [0.2, 0.9, 0.4];
        let loss = |q: &CsnnParams| {
            let tr = q.run(&x, SpikeFn::Relaxed).unwrap();
            crate::snn::mse_loss(&tr.rates.normalized(), &label).unwrap()
        };
        let tr = p.run(&x, SpikeFn::Relaxed).unwrap();
        let g_rates = crate::snn::mse_grad(&tr.rates.normalized(), &label).unwrap();
        let mut g = p.zeros_like();
        p.backward(&tr, &g_rates, &mut g);
        let h = 1e-6;
        let mut checked = 0;
        for (ti, tensor) in g.trainable().iter().enumerate() {
            for (k, &analytic) in tensor.iter().enumerate() {
                let mut plus = p.clone();
                plus.trainable_mut()[ti][k] += h;
                let mut minus = p.clone();
                minus.trainable_mut()[ti][k] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-4, "tensor {ti}[{k}]: {analytic} vs {fd}");
                checked += (analytic != 0.0) as usize;
            }
        }
        assert!(checked > 20, "only {checked} nonzero components");
    }
}
