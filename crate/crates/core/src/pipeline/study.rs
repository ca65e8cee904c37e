use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::backbone::{Adapter, Backbone, BlurSpec, BlurTarget, InterventionPlan, TokenSeq};
use crate::error::Result;
use crate::numerics::{attn_blur_equivalence_residual, gaussian_kernel_1d, key_blur_residual, Padding};
use crate::pipeline::config::CompositionConfig;
use crate::scheduler::NoiseSource;

/// Noise stream for study instances, disjoint from the composition streams.
const STUDY_STREAM: u64 = 3;

pub const EQUIVALENCE_TOLERANCE: f64 = 1e-10;
pub const KEY_BLUR_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceCase {
    pub n: usize,
    pub d: usize,
    pub kernel_size: usize,
    pub sigma: f64,
    pub padding: &'static str,
    pub query_residual: f64,
    pub key_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub cases: Vec<EquivalenceCase>,
}

impl EquivalenceReport {
    pub fn max_query_residual(&self) -> f64 {
        self.cases.iter().map(|c| c.query_residual).fold(0.0, f64::max)
    }

    pub fn min_key_residual(&self) -> f64 {
        self.cases.iter().map(|c| c.key_residual).fold(f64::INFINITY, f64::min)
    }

    /// Share of cases where blurring keys instead of queries changes the weights by more
    /// than [`KEY_BLUR_MARGIN`].
    pub fn key_separation_rate(&self) -> f64 {
        let hits = self.cases.iter().filter(|c| c.key_residual > KEY_BLUR_MARGIN).count();
        hits as f64 / self.cases.len().max(1) as f64
    }

    pub fn all_equivalent(&self) -> bool {
        self.max_query_residual() <= EQUIVALENCE_TOLERANCE
    }
}

/// Random `(Q, K)` pairs with `n ∈ {8,16,32,64}`, `d ∈ {4,8,16}`, Gaussian kernels of
/// size 3–9 and `σ ∈ {0.5,1,2,10}`, alternating zero and replicate padding. For each
/// pair, compares blurring the attention weights against blurring the queries and
/// against blurring the keys.
pub fn equivalence_suite(pairs: usize, seed: u64) -> Result<EquivalenceReport> {
    const NS: [usize; 4] = [8, 16, 32, 64];
    const DS: [usize; 3] = [4, 8, 16];
    const SIZES: [usize; 4] = [3, 5, 7, 9];
    const SIGMAS: [f64; 4] = [0.5, 1.0, 2.0, 10.0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let n = NS[rng.random_range(0..NS.len())];
        let d = DS[rng.random_range(0..DS.len())];
        let kernel_size = SIZES[rng.random_range(0..SIZES.len())];
        let sigma = SIGMAS[rng.random_range(0..SIGMAS.len())];
        let (padding, name) = if i % 2 == 0 { (Padding::Replicate, "replicate") } else { (Padding::Zero, "zero") };
        let mut sample = |r, c| Array2::from_shape_simple_fn((r, c), || rng.sample::<f64, _>(StandardNormal));
        let q = sample(n, d);
        let k = sample(n, d);
        let kernel = gaussian_kernel_1d(kernel_size, sigma)?;
        cases.push(EquivalenceCase {
            n,
            d,
            kernel_size,
            sigma,
            padding: name,
            query_residual: attn_blur_equivalence_residual(q.view(), k.view(), &kernel, padding)?,
            key_residual: key_blur_residual(q.view(), k.view(), &kernel, padding)?,
        });
    }
    Ok(EquivalenceReport { cases })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbRow {
    pub target: BlurTarget,
    /// `‖v_blurred − v‖` per seed.
    pub deltas: Vec<f64>,
}

impl PerturbRow {
    pub fn mean(&self) -> f64 {
        self.deltas.iter().sum::<f64>() / self.deltas.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbTable {
    pub seeds: Vec<u64>,
    pub sigma: f64,
    pub rows: Vec<PerturbRow>,
}

impl PerturbTable {
    pub fn row(&self, target: BlurTarget) -> &PerturbRow {
        self.rows.iter().find(|r| r.target == target).expect("every target has a row")
    }

    /// Seeds on which blurring `a` moves the velocity less than blurring `b`.
    pub fn count_less(&self, a: BlurTarget, b: BlurTarget) -> usize {
        let (ra, rb) = (self.row(a), self.row(b));
        ra.deltas.iter().zip(&rb.deltas).filter(|(x, y)| x < y).count()
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<8}", "target");
        for s in &self.seeds {
            out += &format!(" {:>9}", format!("seed{s}"));
        }
        out += &format!(" {:>9}\n", "mean");
        for r in &self.rows {
            out += &format!("{:<8}", r.target.name());
            for d in &r.deltas {
                out += &format!(" {d:>9.4}");
            }
            out += &format!(" {:>9.4}\n", r.mean());
        }
        out
    }
}

/// Blurs each of the six Q/K/V groups (in every block, `sigma` in token units) on a
/// seeded random latent and subject, and records the L2 change of the adapter-
/// conditioned velocity at step `config.start_step`.
pub fn perturb_study(config: &CompositionConfig, seeds: &[u64], sigma: f64, prompt: &str) -> Result<PerturbTable> {
    config.validate()?;
    let model = Backbone::new(config.model.clone())?;
    let adapter = Adapter::new(config.adapter.clone(), &config.model)?;
    let text = TokenSeq::from_prompt(prompt, config.model.dim, config.text_seed);
    let c = config.model.latent_channels;
    let t = config.start_step;
    let mut rows: Vec<PerturbRow> =
        BlurTarget::ALL.iter().map(|&target| PerturbRow { target, deltas: Vec::new() }).collect();
    for &seed in seeds {
        let mut noise = NoiseSource::new(seed, STUDY_STREAM);
        let z = noise.next_grid(c, 16, 16);
        let subject = noise.next_grid(c, 8, 8);
        let run = |plan: &InterventionPlan| {
            model.predict_velocity(Some(&adapter), &z, t, &text, Some(&subject), plan).map(|r| r.0)
        };
        let base = run(&InterventionPlan::none())?;
        for row in rows.iter_mut() {
            let spec = BlurSpec::new(row.target, sigma).with_padding(config.dsg_padding);
            row.deltas.push(run(&InterventionPlan::blur(spec))?.sub(&base)?.norm());
        }
    }
    Ok(PerturbTable { seeds: seeds.to_vec(), sigma, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_is_seeded() {
        let a = equivalence_suite(6, 3).unwrap();
        assert_eq!(a, equivalence_suite(6, 3).unwrap());
        assert!(a.all_equivalent());
    }
}
