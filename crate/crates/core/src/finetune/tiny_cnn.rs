//! A small convolutional classifier trained from scratch on CPU.
//!
//! The crop is area-downsampled to `SIDE`x`SIDE`, scaled to `[-1, 1]`, run
//! through one 3x3 valid convolution with ReLU, global-average pooled and
//! fed to a dense softmax layer.

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const SIDE: usize = 16;
pub const CHANNELS: usize = 8;
const K: usize = 3;
const OUT: usize = SIDE - K + 1;

/// Input tensor, channel-major `[3][SIDE][SIDE]`.
pub type Input = Vec<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyCnn {
    pub labels: Vec<String>,
    /// `[CHANNELS][3][K][K]`
    pub conv_w: Vec<f64>,
    pub conv_b: Vec<f64>,
    /// `[classes][CHANNELS]`
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
}

/// Gradients, same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub conv_w: Vec<f64>,
    pub conv_b: Vec<f64>,
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
}

impl Grads {
    pub fn zeros_like(net: &TinyCnn) -> Self {
        Self {
            conv_w: vec![0.0; net.conv_w.len()],
            conv_b: vec![0.0; net.conv_b.len()],
            dense_w: vec![0.0; net.dense_w.len()],
            dense_b: vec![0.0; net.dense_b.len()],
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in [&mut self.conv_w, &mut self.conv_b, &mut self.dense_w, &mut self.dense_b] {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }
}

struct Forward {
    pre: Vec<f64>,
    pooled: Vec<f64>,
    probs: Vec<f64>,
}

pub fn preprocess(crop: &RgbImage) -> Input {
    let small = if crop.dimensions() == (SIDE as u32, SIDE as u32) {
        crop.clone()
    } else {
        imageops::resize(crop, SIDE as u32, SIDE as u32, FilterType::Triangle)
    };
    let mut x = vec![0.0; 3 * SIDE * SIDE];
    for (px, py, p) in small.enumerate_pixels() {
        for c in 0..3 {
            x[c * SIDE * SIDE + py as usize * SIDE + px as usize] = p.0[c] as f64 / 127.5 - 1.0;
        }
    }
    x
}

impl TinyCnn {
    pub fn init(labels: Vec<String>, rng: &mut impl Rng) -> Self {
        let classes = labels.len();
        let conv_std = (2.0 / (3 * K * K) as f64).sqrt();
        let dense_std = (1.0 / CHANNELS as f64).sqrt();
        let conv = Normal::new(0.0, conv_std).expect("valid std");
        let dense = Normal::new(0.0, dense_std).expect("valid std");
        Self {
            labels,
            conv_w: (0..CHANNELS * 3 * K * K).map(|_| conv.sample(rng)).collect(),
            conv_b: vec![0.0; CHANNELS],
            dense_w: (0..classes * CHANNELS).map(|_| dense.sample(rng)).collect(),
            dense_b: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn parameter_count(&self) -> u64 {
        (self.conv_w.len() + self.conv_b.len() + self.dense_w.len() + self.dense_b.len()) as u64
    }

    pub fn check_shapes(&self) -> Result<(), String> {
        let c = self.classes();
        let ok = c >= 1
            && self.conv_w.len() == CHANNELS * 3 * K * K
            && self.conv_b.len() == CHANNELS
            && self.dense_w.len() == c * CHANNELS
            && self.dense_b.len() == c;
        let finite = [&self.conv_w, &self.conv_b, &self.dense_w, &self.dense_b].iter().all(|v| v.iter().all(|x| x.is_finite()));
        if !ok {
            return Err("parameter shapes do not match the architecture".into());
        }
        if !finite {
            return Err("non-finite parameter".into());
        }
        Ok(())
    }

    fn forward(&self, x: &Input) -> Forward {
        let mut pre = vec![0.0; CHANNELS * OUT * OUT];
        let mut pooled = vec![0.0; CHANNELS];
        for o in 0..CHANNELS {
            let mut sum = 0.0;
            for i in 0..OUT {
                for j in 0..OUT {
                    let mut acc = self.conv_b[o];
                    for c in 0..3 {
                        for di in 0..K {
                            let row = c * SIDE * SIDE + (i + di) * SIDE + j;
                            let w = ((o * 3 + c) * K + di) * K;
                            for dj in 0..K {
                                acc += self.conv_w[w + dj] * x[row + dj];
                            }
                        }
                    }
                    pre[(o * OUT + i) * OUT + j] = acc;
                    sum += acc.max(0.0);
                }
            }
            pooled[o] = sum / (OUT * OUT) as f64;
        }
        let logits: Vec<f64> = (0..self.classes())
            .map(|k| self.dense_b[k] + (0..CHANNELS).map(|o| self.dense_w[k * CHANNELS + o] * pooled[o]).sum::<f64>())
            .collect();
        Forward { pre, pooled, probs: softmax(&logits) }
    }

    pub fn predict(&self, x: &Input) -> Vec<f64> {
        self.forward(x).probs
    }

    /// Cross-entropy of `x` against `target`, accumulating its gradient into `grads`.
    pub fn loss_and_grad(&self, x: &Input, target: usize, grads: &mut Grads) -> f64 {
        let f = self.forward(x);
        let loss = -f.probs[target].max(f64::MIN_POSITIVE).ln();
        let mut dlogit = f.probs.clone();
        dlogit[target] -= 1.0;

        let mut dpooled = vec![0.0; CHANNELS];
        for (k, g) in dlogit.iter().enumerate() {
            grads.dense_b[k] += g;
            for o in 0..CHANNELS {
                grads.dense_w[k * CHANNELS + o] += g * f.pooled[o];
                dpooled[o] += g * self.dense_w[k * CHANNELS + o];
            }
        }
        let area = (OUT * OUT) as f64;
        for o in 0..CHANNELS {
            let d = dpooled[o] / area;
            for i in 0..OUT {
                for j in 0..OUT {
                    if f.pre[(o * OUT + i) * OUT + j] <= 0.0 {
                        continue;
                    }
                    grads.conv_b[o] += d;
                    for c in 0..3 {
                        for di in 0..K {
                            let row = c * SIDE * SIDE + (i + di) * SIDE + j;
                            let w = ((o * 3 + c) * K + di) * K;
                            for dj in 0..K {
                                grads.conv_w[w + dj] += d * x[row + dj];
                            }
                        }
                    }
                }
            }
        }
        loss
    }

    /// Mutable views of all parameters, in a fixed order.
    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.conv_w, &mut self.conv_b, &mut self.dense_w, &mut self.dense_b]
    }
}

impl Grads {
    pub fn parts(&self) -> [&Vec<f64>; 4] {
        [&self.conv_w, &self.conv_b, &self.dense_w, &self.dense_b]
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(rng: &mut impl Rng) -> Input {
        (0..3 * SIDE * SIDE).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = TinyCnn::init(vec!["a".into(), "b".into(), "c".into()], &mut rng);
        let x = sample(&mut rng);
        let target = 1;
        let mut grads = Grads::zeros_like(&net);
        net.loss_and_grad(&x, target, &mut grads);

        // ten probes spread across all four parameter blocks
        let probes = [(0, 0), (0, 40), (0, 130), (0, 215), (1, 2), (1, 7), (2, 0), (2, 13), (3, 0), (3, 2)];
        let h = 1e-5;
        for (block, idx) in probes {
            let eval = |delta: f64| {
                let mut n = net.clone();
                n.params_mut()[block][idx] += delta;
                let mut scratch = Grads::zeros_like(&n);
                n.loss_and_grad(&x, target, &mut scratch)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = grads.parts()[block][idx];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(rel < 1e-4, "block {block} idx {idx}: analytic {analytic} numeric {numeric}");
        }
    }

    #[test]
    fn predict_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = TinyCnn::init((0..5).map(|i| i.to_string()).collect(), &mut rng);
        let p = net.predict(&sample(&mut rng));
        assert_eq!(p.len(), 5);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(net.parameter_count(), (8 * 27 + 8 + 5 * 8 + 5) as u64);
    }

    #[test]
    fn preprocess_scales_to_unit_range() {
        let x = preprocess(&RgbImage::from_pixel(40, 40, image::Rgb([255, 0, 128])));
        assert_eq!(x.len(), 3 * SIDE * SIDE);
        assert_eq!(x[0], 1.0);
        assert_eq!(x[SIDE * SIDE], -1.0);
    }
}
