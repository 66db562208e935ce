use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::EmulatorError;
use crate::protocol::SampleFrame;

pub const CLASS_COUNT: u8 = 7;

/// Seven gesture classes, in label order.
pub const CLASS_NAMES: [&str; 7] = [
    "no movement",
    "wrist supination",
    "wrist pronation",
    "hand close",
    "hand open",
    "wrist flexion",
    "wrist extension",
];

/// Block-structured noise generator standing in for forearm EMG.
///
/// Every channel carries zero-mean Gaussian noise with `baseline_sigma`.
/// Class `k >= 1` additionally drives the `k`-th block of
/// `channel_count / 6` channels (32 at 192 channels) with independent noise
/// of `active_sigma`. Frame `t` depends only on `(seed, t, class)`.
#[derive(Debug, Clone)]
pub struct Synth {
    pub seed: u64,
    pub channel_count: usize,
    pub baseline_sigma: f64,
    pub active_sigma: f64,
}

impl Synth {
    pub fn new(seed: u64, channel_count: usize, baseline_sigma: f64, active_sigma: f64) -> Self {
        Self {
            seed,
            channel_count,
            baseline_sigma,
            active_sigma,
        }
    }

    pub fn block_len(&self) -> usize {
        (self.channel_count / 6).max(1)
    }

    /// Channel range driven by `class_id`; empty for class 0.
    pub fn active_block(&self, class_id: u8) -> std::ops::Range<usize> {
        if class_id == 0 {
            return 0..0;
        }
        let b = self.block_len();
        let start = (class_id as usize - 1) * b;
        start.min(self.channel_count)..(start + b).min(self.channel_count)
    }

    pub fn frame(&self, class_id: u8, t: u64) -> Result<SampleFrame, EmulatorError> {
        let mut samples = vec![0i16; self.channel_count];
        self.fill_frame(class_id, t, &mut samples)?;
        Ok(SampleFrame { seq: t, samples })
    }

    pub fn fill_frame(&self, class_id: u8, t: u64, out: &mut [i16]) -> Result<(), EmulatorError> {
        if class_id >= CLASS_COUNT {
            return Err(EmulatorError::InvalidClass(class_id as i32));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(t);
        let active = self.active_block(class_id);
        for (ch, slot) in out.iter_mut().enumerate() {
            let base: f64 = StandardNormal.sample(&mut rng);
            let mut v = base * self.baseline_sigma;
            if active.contains(&ch) {
                let extra: f64 = StandardNormal.sample(&mut rng);
                v += extra * self.active_sigma;
            }
            *slot = v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rms_per_channel(s: &Synth, class: u8, n: u64) -> Vec<f64> {
        let mut acc = vec![0f64; s.channel_count];
        for t in 0..n {
            let f = s.frame(class, t).unwrap();
            for (a, &x) in acc.iter_mut().zip(&f.samples) {
                *a += (x as f64).powi(2);
            }
        }
        acc.into_iter().map(|a| (a / n as f64).sqrt()).collect()
    }

    #[test]
    fn deterministic() {
        let s = Synth::new(7, 192, 50.0, 250.0);
        assert_eq!(s.frame(3, 1234).unwrap(), s.frame(3, 1234).unwrap());
        assert_ne!(s.frame(3, 1234).unwrap(), s.frame(3, 1235).unwrap());
        let other = Synth::new(8, 192, 50.0, 250.0);
        assert_ne!(s.frame(3, 1234).unwrap(), other.frame(3, 1234).unwrap());
    }

    #[test]
    fn rest_class_is_baseline_everywhere() {
        let s = Synth::new(1, 192, 50.0, 250.0);
        for r in rms_per_channel(&s, 0, 512) {
            assert!((r - 50.0).abs() < 0.15 * 50.0, "rms {r}");
        }
    }

    #[test]
    fn active_block_power() {
        let s = Synth::new(2, 192, 50.0, 250.0);
        assert_eq!(s.active_block(3), 64..96);
        let rms = rms_per_channel(&s, 3, 512);
        let block =
            |r: std::ops::Range<usize>| (rms[r.clone()].iter().map(|x| x * x).sum::<f64>() / r.len() as f64).sqrt();
        let active = (50f64.powi(2) + 250f64.powi(2)).sqrt();
        assert!((block(64..96) - active).abs() < 0.15 * active);
        for b in [0..32, 32..64, 96..128, 128..160, 160..192] {
            assert!((block(b) - 50.0).abs() < 0.15 * 50.0);
        }
    }

    #[test]
    fn invalid_class() {
        let s = Synth::new(0, 192, 50.0, 250.0);
        assert!(matches!(s.frame(7, 0), Err(EmulatorError::InvalidClass(7))));
    }
}
