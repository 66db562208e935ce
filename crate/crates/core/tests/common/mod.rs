//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use neuroedge::bridge::Window;
use neuroedge::emulator::Synth;
use neuroedge::nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Non-reflected MSB-first CRC with poly 0x31 over bit-reversed input; the
/// bit-reversed register is the reflected CRC-8/MAXIM.
pub fn crc8_msb_first_oracle(data: &[u8]) -> u8 {
    let mut crc = 0u8;
    for &b in data {
        crc ^= b.reverse_bits();
        for _ in 0..8 {
            crc = if crc & 0x80 != 0 { (crc << 1) ^ 0x31 } else { crc << 1 };
        }
    }
    crc.reverse_bits()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, l: usize) -> Tensor {
    Tensor::new(c, l, (0..c * l).map(|_| rng.random_range(-3.0f32..3.0)).collect()).unwrap()
}

/// Triple loop over (out channel, position, in channel, tap) with the same
/// summation order as the contract: zero start, ascending (ic, tap), bias last.
pub fn conv_oracle(x: &[Vec<f32>], w: &[Vec<Vec<f32>>], b: &[f32], stride: usize) -> Vec<Vec<f32>> {
    let k = w[0][0].len();
    let l = x[0].len();
    let n_out = (l - k) / stride + 1;
    let mut y = vec![vec![0f32; n_out]; w.len()];
    for o in 0..w.len() {
        for p in 0..n_out {
            let mut s = 0f32;
            for i in 0..x.len() {
                for t in 0..k {
                    s += x[i][p * stride + t] * w[o][i][t];
                }
            }
            y[o][p] = s + b[o];
        }
    }
    y
}

/// Kahan-compensated f64 mean.
pub fn kahan_mean(xs: &[f32]) -> f64 {
    let (mut sum, mut comp) = (0f64, 0f64);
    for &v in xs {
        let yv = v as f64 - comp;
        let t = sum + yv;
        comp = (t - sum) - yv;
        sum = t;
    }
    sum / xs.len() as f64
}

pub fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f32::MIN, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&l| (l as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn synth_window(s: &Synth, class: u8, t0: u64) -> Window {
    let mut samples = Vec::with_capacity(20 * 192);
    for t in t0..t0 + 20 {
        samples.extend(s.frame(class, t).unwrap().samples);
    }
    Window::new(20, 192, t0, samples)
}

/// Default-geometry windows of random class at random stream offsets.
pub fn random_windows(seed: u64, n: usize) -> Vec<Window> {
    let synth = Synth::new(seed, 192, 50.0, 250.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| synth_window(&synth, rng.random_range(0..7), rng.random_range(0..1_000_000)))
        .collect()
}
