//! Small fully-connected networks with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat `Vec<f64>`; for each layer the weight matrix
//! comes first (row-major, `out x in`) followed by the bias vector. Hidden
//! layers use `tanh`, the output layer is linear.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::SimRng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Layer widths, input first: `[in, h1, ..., out]`.
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Per-layer activations recorded by [`Mlp::forward_cached`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Uniform fan-in initialisation; the last layer is scaled by
    /// `out_scale` (small values give a near-uniform initial policy).
    pub fn new(sizes: &[usize], out_scale: f64, rng: &mut SimRng) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0));
        let mut params = Vec::with_capacity(param_count(sizes));
        let last = sizes.len() - 2;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (1.0 / fan_in as f64).sqrt() * if l == last { out_scale } else { 1.0 };
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-1.0..1.0) * bound);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self { sizes: sizes.to_vec(), params }
    }

    pub fn from_params(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Format(format!("bad layer sizes {sizes:?}")));
        }
        let expected = param_count(&sizes);
        if params.len() != expected {
            return Err(Error::Dimension {
                what: "network parameters",
                expected,
                got: params.len(),
            });
        }
        Ok(Self { sizes, params })
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).acts.pop().unwrap()
    }

    pub fn forward_cached(&self, x: &[f64]) -> Tape {
        debug_assert_eq!(x.len(), self.input_len());
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        let mut off = 0;
        for l in 0..n_layers {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + fi * fo];
            let b = &self.params[off + fi * fo..off + fi * fo + fo];
            let input = &acts[l];
            let mut out: Vec<f64> = (0..fo)
                .map(|o| {
                    let row = &w[o * fi..(o + 1) * fi];
                    b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if l + 1 < n_layers {
                out.iter_mut().for_each(|z| *z = z.tanh());
            }
            acts.push(out);
            off += fi * fo + fo;
        }
        Tape { acts }
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d output`.
    pub fn backward(&self, tape: &Tape, d_out: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = d_out.to_vec();
        for l in (0..n_layers).rev() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &tape.acts[l];
            // delta is d loss / d pre-activation of layer l
            for o in 0..fo {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[off + o * fi..off + (o + 1) * fi];
                g.iter_mut().zip(input).for_each(|(g, x)| *g += d * x);
                grad[off + fi * fo + o] += d;
            }
            if l > 0 {
                let w = &self.params[off..off + fi * fo];
                let mut prev = vec![0.0; fi];
                for o in 0..fo {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    prev.iter_mut()
                        .zip(&w[o * fi..(o + 1) * fi])
                        .for_each(|(p, w)| *p += d * w);
                }
                // tanh' = 1 - a^2 on the hidden activation
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Descends along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn fd_check(sizes: &[usize], seed: u64) {
        let mut rng = seeded(seed);
        let mut net = Mlp::new(sizes, 1.0, &mut rng);
        // non-zero biases so every parameter matters
        for p in net.params.iter_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |n: &Mlp| n.forward(&x).iter().zip(&c).map(|(o, c)| o * c + 0.5 * o * o).sum::<f64>();

        let tape = net.forward_cached(&x);
        let d_out: Vec<f64> = tape.output().iter().zip(&c).map(|(o, c)| c + o).collect();
        let mut grad = vec![0.0; net.params.len()];
        net.backward(&tape, &d_out, &mut grad);

        let h = 1e-6;
        for k in 0..net.params.len() {
            let orig = net.params[k];
            net.params[k] = orig + h;
            let lp = loss(&net);
            net.params[k] = orig - h;
            let lm = loss(&net);
            net.params[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
            assert!(err < 1e-5, "param {k}: fd {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(&[3, 2], 1);
        fd_check(&[4, 5, 3], 2);
        fd_check(&[5, 6, 6, 4], 3);
    }

    #[test]
    fn layout_and_counts() {
        assert_eq!(param_count(&[22, 64, 64, 8]), 22 * 64 + 64 + 64 * 64 + 64 + 64 * 8 + 8);
        let net = Mlp::from_params(vec![1, 2], vec![0.5, -1.0, 0.25, 0.0]).unwrap();
        // W = [[0.5], [-1.0]], b = [0.25, 0.0]
        assert_eq!(net.forward(&[2.0]), vec![1.25, -2.0]);
        assert!(Mlp::from_params(vec![1, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_normalised() {
        let p = softmax(&[1000.0, 0.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = log_softmax(&[0.3, -1.2, 2.0]);
        let p = softmax(&[0.3, -1.2, 2.0]);
        for (a, b) in lp.iter().zip(&p) {
            assert!((a.exp() - b).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g = vec![2.0 * x[0], 2.0 * (x[1] - 1.0)];
            opt.step(&mut x, &g);
        }
        assert!(x[0].abs() < 1e-3 && (x[1] - 1.0).abs() < 1e-3);
    }
}
