//! Flow-matching noise levels, one-step forward diffusion and Euler steps.
//!
//! Latents move along straight lines `z_σ = (1 − σ)·z₀ + σ·ε`, so the reverse process
//! integrates `dz/dσ = v` from the starting noise level down to `σ = 0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::LatentGrid;

/// Noise stream used for the initial forward diffusion.
pub const INIT_STREAM: u64 = 0;
/// Noise stream used for the per-step noisy background.
pub const BACKGROUND_STREAM: u64 = 1;
/// Noise stream used by the asset generator.
pub const ASSET_STREAM: u64 = 2;

/// Noise levels `σ_t` for steps `t = T−1 … 0`, strictly decreasing with `σ_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSchedule {
    // by_step[t] = σ_t
    by_step: Vec<f64>,
}

impl SigmaSchedule {
    /// Builds a schedule from levels listed from the highest step down to step 0.
    pub fn from_descending(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(Error::invalid("a schedule needs at least two levels"));
        }
        if sigmas.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid("noise levels must lie in [0,1]"));
        }
        if sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("noise levels must be strictly decreasing"));
        }
        if *sigmas.last().unwrap() != 0.0 {
            return Err(Error::invalid("the final noise level must be exactly 0"));
        }
        let mut by_step = sigmas;
        by_step.reverse();
        Ok(Self { by_step })
    }

    /// Number of steps `T`.
    pub fn total_steps(&self) -> usize {
        self.by_step.len()
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.by_step
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("step {t} outside schedule of {} steps", self.by_step.len())))
    }

    /// Levels from step `T−1` down to step 0.
    pub fn descending(&self) -> Vec<f64> {
        self.by_step.iter().rev().copied().collect()
    }
}

/// Linear schedule `σ_t = t / T` for `t = T−1 … 0`.
pub fn make_schedule(total_steps: usize) -> Result<SigmaSchedule> {
    if total_steps < 2 {
        return Err(Error::invalid(format!("need at least 2 steps, got {total_steps}")));
    }
    let t = total_steps as f64;
    SigmaSchedule::from_descending((0..total_steps).rev().map(|i| i as f64 / t).collect())
}

/// Seeded standard-normal source. Draw `i` of stream `s` under seed `k` is the same
/// grid no matter how many other draws or streams were used before it.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    seed: u64,
    stream: u64,
    draws: u64,
}

impl NoiseSource {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream, draws: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of grids drawn so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Grid number `index` of this stream, without advancing.
    pub fn draw_at(&self, index: u64, channels: usize, height: usize, width: usize) -> LatentGrid {
        let mut hasher = Sha256::new();
        hasher.update(b"shine-lab/noise");
        hasher.update(self.seed.to_le_bytes());
        hasher.update(self.stream.to_le_bytes());
        hasher.update(index.to_le_bytes());
        let seed: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let data = (0..channels * height * width)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        LatentGrid::from_vec(channels, height, width, data).expect("length matches shape")
    }

    pub fn next_grid(&mut self, channels: usize, height: usize, width: usize) -> LatentGrid {
        let grid = self.draw_at(self.draws, channels, height, width);
        self.draws += 1;
        grid
    }

    pub fn next_like(&mut self, like: &LatentGrid) -> LatentGrid {
        let (c, h, w) = like.shape();
        self.next_grid(c, h, w)
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::invalid(format!("noise level {sigma} outside [0,1]")));
    }
    Ok(())
}

/// `(1 − σ)·z + σ·ε` with an explicit `ε`. At `σ = 0` the clean latent is returned untouched.
pub fn forward_diffuse_with(z: &LatentGrid, sigma: f64, eps: &LatentGrid) -> Result<LatentGrid> {
    check_sigma(sigma)?;
    z.ensure_same_shape(eps, "forward diffusion noise")?;
    if sigma == 0.0 {
        return Ok(z.clone());
    }
    let mut out = z.array().clone();
    out.zip_mut_with(eps.array(), |a, e| *a = (1.0 - sigma) * *a + sigma * e);
    Ok(LatentGrid::from_array(out))
}

/// One-step forward diffusion of a clean latent to noise level `sigma`.
pub fn forward_diffuse(z_init: &LatentGrid, sigma: f64, noise: &mut NoiseSource) -> Result<LatentGrid> {
    check_sigma(sigma)?;
    let eps = noise.next_like(z_init);
    forward_diffuse_with(z_init, sigma, &eps)
}

/// `z + (σ_prev − σ_t)·v`.
pub fn euler_step(z: &LatentGrid, v: &LatentGrid, sigma_t: f64, sigma_prev: f64) -> Result<LatentGrid> {
    if !(sigma_prev < sigma_t) {
        return Err(Error::invalid(format!(
            "euler step needs decreasing noise levels, got {sigma_t} -> {sigma_prev}"
        )));
    }
    z.ensure_same_shape(v, "euler step velocity")?;
    let dt = sigma_prev - sigma_t;
    let mut out = z.array().clone();
    out.zip_mut_with(v.array(), |a, b| *a += dt * b);
    Ok(LatentGrid::from_array(out))
}

/// The background re-noised to `sigma_prev` with a fresh draw.
pub fn noisy_background(z_bg: &LatentGrid, sigma_prev: f64, noise: &mut NoiseSource) -> Result<LatentGrid> {
    forward_diffuse(z_bg, sigma_prev, noise)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_step_schedule() {
        let s = make_schedule(20).unwrap();
        let d = s.descending();
        assert_eq!(d.len(), 20);
        assert_eq!(d[0], 0.95);
        assert_eq!(*d.last().unwrap(), 0.0);
        assert_eq!(s.sigma(14).unwrap(), 0.7);
    }

    #[test]
    fn two_step_schedule() {
        assert_eq!(make_schedule(2).unwrap().descending(), vec![0.5, 0.0]);
        assert!(make_schedule(1).is_err());
        assert!(make_schedule(0).is_err());
    }

    #[test]
    fn schedules_are_monotone() {
        for n in 2..=64 {
            let d = make_schedule(n).unwrap().descending();
            assert!(d.windows(2).all(|w| w[1] < w[0]));
            assert_eq!(*d.last().unwrap(), 0.0);
        }
    }

    #[test]
    fn custom_schedule_validation() {
        assert!(SigmaSchedule::from_descending(vec![1.0, 0.5, 0.0]).is_ok());
        assert!(SigmaSchedule::from_descending(vec![1.0, 0.5, 0.1]).is_err());
        assert!(SigmaSchedule::from_descending(vec![0.5, 0.5, 0.0]).is_err());
        assert!(SigmaSchedule::from_descending(vec![1.5, 0.0]).is_err());
    }

    #[test]
    fn forward_diffuse_endpoints() {
        let z = LatentGrid::full(2, 3, 3, 2.0);
        let mut noise = NoiseSource::new(1, INIT_STREAM);
        assert_eq!(forward_diffuse(&z, 0.0, &mut noise).unwrap(), z);
        let eps = noise.draw_at(1, 2, 3, 3);
        assert_eq!(forward_diffuse(&z, 1.0, &mut noise).unwrap(), eps);
        let zero = LatentGrid::zeros(2, 3, 3);
        let half = forward_diffuse_with(&z, 0.5, &zero).unwrap();
        assert!(half.array().iter().all(|v| *v == 1.0));
        assert!(forward_diffuse(&z, 1.5, &mut noise).is_err());
        assert!(forward_diffuse(&z, -0.1, &mut noise).is_err());
    }

    #[test]
    fn euler_cases() {
        let z = LatentGrid::full(1, 2, 2, 3.0);
        let zero = LatentGrid::zeros(1, 2, 2);
        assert_eq!(euler_step(&z, &zero, 0.75, 0.70).unwrap(), z);
        let v = LatentGrid::full(1, 2, 2, 2.0);
        let out = euler_step(&z, &v, 0.75, 0.70).unwrap();
        assert!(out.array().iter().all(|x| (x - 2.9).abs() < 1e-12));
        assert!(euler_step(&z, &v, 0.5, 0.5).is_err());
        assert!(euler_step(&z, &v, 0.4, 0.5).is_err());
    }

    #[test]
    fn constant_velocity_telescopes() {
        let sched = SigmaSchedule::from_descending(vec![1.0, 0.75, 0.5, 0.25, 0.0]).unwrap();
        let z1 = LatentGrid::full(1, 1, 2, 0.3);
        let v = LatentGrid::full(1, 1, 2, 1.25);
        let mut z = z1.clone();
        let d = sched.descending();
        for w in d.windows(2) {
            z = euler_step(&z, &v, w[0], w[1]).unwrap();
        }
        let want = z1.sub(&v).unwrap();
        assert!(z.max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn background_noise_is_fresh_per_draw() {
        let z = LatentGrid::full(1, 2, 2, 1.0);
        let mut noise = NoiseSource::new(3, BACKGROUND_STREAM);
        let a = noisy_background(&z, 0.5, &mut noise).unwrap();
        let b = noisy_background(&z, 0.5, &mut noise).unwrap();
        assert_ne!(a, b);
        assert_eq!(noisy_background(&z, 0.0, &mut noise).unwrap(), z);
        let eps = noise.draw_at(noise.draws(), 1, 2, 2);
        assert_eq!(noisy_background(&z, 1.0, &mut noise).unwrap(), eps);
    }

    #[test]
    fn noise_is_reproducible_and_stream_separated() {
        let a = NoiseSource::new(7, 0).draw_at(4, 2, 4, 4);
        let b = NoiseSource::new(7, 0).draw_at(4, 2, 4, 4);
        assert!(a.bitwise_eq(&b));
        assert_ne!(a, NoiseSource::new(7, 1).draw_at(4, 2, 4, 4));
        assert_ne!(a, NoiseSource::new(8, 0).draw_at(4, 2, 4, 4));
        let mut s = NoiseSource::new(7, 0);
        for _ in 0..4 {
            s.next_grid(2, 4, 4);
        }
        assert!(s.next_grid(2, 4, 4).bitwise_eq(&a));
    }
}
