use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{CmrKind, ExactBridge, LatentModel, LatentState};
use crate::error::{config_err, Result};
use crate::points::PointSet;
use crate::stats::gauss_iso;

/// Confounded POMDP with finitely many latent states and Gaussian emissions.
///
/// Rewards are ρ(x, u) + δ·(2B − 1) with B ~ Beta(2, 2), so every conditional law
/// has a density and the bridge equations have exact closed-form solutions
/// (see [`FiniteLatentPomdp::exact_bridge`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiniteLatentSpec {
    pub horizon: usize,
    /// One emission mean per latent state.
    pub emission_means: Vec<Vec<f64>>,
    pub emission_sd: f64,
    pub initial: Vec<f64>,
    /// Row-stochastic transition matrices for u = 0 and u = 1.
    pub transitions: [Vec<Vec<f64>>; 2],
    /// Logging-policy P(U = 1 | x) per state.
    pub behavior: Vec<f64>,
    /// Reward centers ρ(x, u) per state, for u = 0 and u = 1.
    pub reward_centers: Vec<[f64; 2]>,
    pub reward_halfwidth: f64,
}

impl Default for FiniteLatentSpec {
    fn default() -> Self {
        Self::three_state(2)
    }
}

impl FiniteLatentSpec {
    /// Three states on a line, observed through a scalar channel.
    pub fn three_state(horizon: usize) -> Self {
        Self {
            horizon,
            emission_means: vec![vec![-1.5], vec![0.0], vec![1.5]],
            emission_sd: 0.6,
            initial: vec![0.3, 0.4, 0.3],
            transitions: [
                vec![vec![0.7, 0.2, 0.1], vec![0.4, 0.4, 0.2], vec![0.2, 0.4, 0.4]],
                vec![vec![0.4, 0.4, 0.2], vec![0.2, 0.4, 0.4], vec![0.1, 0.2, 0.7]],
            ],
            behavior: vec![0.2, 0.5, 0.8],
            reward_centers: vec![[-0.5, -0.2], [0.0, 0.2], [0.3, 0.6]],
            reward_halfwidth: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.emission_means.len();
        if self.horizon < 1 {
            return config_err("horizon must be at least 1");
        }
        if j < 1 {
            return config_err("at least one latent state is required");
        }
        let d = self.emission_means[0].len();
        if d < 1 || self.emission_means.iter().any(|e| e.len() != d) {
            return config_err("emission means must share a positive dimension");
        }
        if !(self.emission_sd > 0.0 && self.emission_sd.is_finite()) {
            return config_err("emission_sd must be positive");
        }
        let is_dist = |p: &[f64]| p.iter().all(|&v| v >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if self.initial.len() != j || !is_dist(&self.initial) {
            return config_err("initial law must be a probability vector over the states");
        }
        for t in &self.transitions {
            if t.len() != j || t.iter().any(|row| row.len() != j || !is_dist(row)) {
                return config_err("transition matrices must be row-stochastic and square");
            }
        }
        if self.behavior.len() != j || self.behavior.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return config_err("behavior probabilities must lie in [0, 1], one per state");
        }
        if !(self.reward_halfwidth > 0.0) || self.reward_centers.len() != j {
            return config_err("rewards need one center pair per state and a positive half-width");
        }
        if self.reward_centers.iter().flatten().any(|c| c.abs() + self.reward_halfwidth > 1.0) {
            return config_err("reward support must stay inside [-1, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FiniteLatentPomdp {
    spec: FiniteLatentSpec,
    support: Vec<LatentState>,
    means: PointSet,
}

impl FiniteLatentPomdp {
    pub fn new(spec: FiniteLatentSpec) -> Result<Self> {
        spec.validate()?;
        let j = spec.emission_means.len();
        let support = (0..j).map(|i| LatentState(vec![i as f64])).collect();
        let means = PointSet::from_rows(&spec.emission_means)?;
        let model = Self { spec, support, means };
        // fails when two states share an emission law
        ExactBridge::new(&model, CmrKind::Transition)?;
        Ok(model)
    }

    pub fn spec(&self) -> &FiniteLatentSpec {
        &self.spec
    }

    pub fn num_states(&self) -> usize {
        self.support.len()
    }

    fn state(x: &LatentState) -> usize {
        x.0[0] as usize
    }

    /// An exact solution of the bridge equation of the given kind:
    /// b(u, y, z) = Σ_j β_j(y) p(z | X = j, u). The emission law does not change over
    /// time, so the same function solves the equation at every stage.
    pub fn exact_bridge(&self, kind: CmrKind) -> FiniteBridge {
        ExactBridge::new(self, kind).expect("validated finite models admit exact bridges")
    }
}

impl LatentModel for FiniteLatentPomdp {
    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn obs_dim(&self) -> usize {
        self.means.dim()
    }

    fn emission_sd(&self) -> f64 {
        self.spec.emission_sd
    }

    fn emission_mean(&self, x: &LatentState) -> Vec<f64> {
        self.means.row(Self::state(x)).to_vec()
    }

    fn behavior_prob(&self, x: &LatentState) -> f64 {
        self.spec.behavior[Self::state(x)]
    }

    fn sample_initial(&self, rng: &mut ChaCha8Rng) -> LatentState {
        self.support[pick(&self.spec.initial, rng)].clone()
    }

    fn sample_transition(&self, x: &LatentState, u: u8, rng: &mut ChaCha8Rng) -> LatentState {
        let row = &self.spec.transitions[usize::from(u)][Self::state(x)];
        self.support[pick(row, rng)].clone()
    }

    fn sample_reward(&self, x: &LatentState, u: u8, rng: &mut ChaCha8Rng) -> f64 {
        let center = self.spec.reward_centers[Self::state(x)][usize::from(u)];
        let b: f64 = Beta::new(2.0, 2.0).expect("valid beta parameters").sample(rng);
        center + self.spec.reward_halfwidth * (2.0 * b - 1.0)
    }

    fn reward_density(&self, x: &LatentState, u: u8, r: f64) -> Option<f64> {
        let center = self.spec.reward_centers[Self::state(x)][usize::from(u)];
        let h = self.spec.reward_halfwidth;
        let v = (r - center + h) / (2.0 * h);
        Some(if (0.0..=1.0).contains(&v) { 6.0 * v * (1.0 - v) / (2.0 * h) } else { 0.0 })
    }

    fn next_obs_density(&self, x: &LatentState, u: u8, y_next: &[f64]) -> f64 {
        let row = &self.spec.transitions[usize::from(u)][Self::state(x)];
        row.iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(j, p)| p * gauss_iso(y_next, self.means.row(j), self.spec.emission_sd))
            .sum()
    }

    fn filter_support(&self) -> &[LatentState] {
        &self.support
    }

    fn filter_emission_means(&self) -> &PointSet {
        &self.means
    }

    fn filter_prior(&self) -> &[f64] {
        &self.spec.initial
    }

    fn filter_behavior(&self) -> &[f64] {
        &self.spec.behavior
    }

    fn has_finite_latent(&self) -> bool {
        true
    }

    fn filter_propagate(&self, weights: &[f64], u: u8) -> Vec<f64> {
        let t = &self.spec.transitions[usize::from(u)];
        let j = weights.len();
        let mut out = vec![0.0; j];
        for (a, &w) in weights.iter().enumerate() {
            for b in 0..j {
                out[b] += w * t[a][b];
            }
        }
        out
    }
}

fn pick(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let v: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if v < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Closed-form bridge of a [`FiniteLatentPomdp`].
pub type FiniteBridge = ExactBridge<FiniteLatentPomdp>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = FiniteLatentSpec::three_state(2);
        s.initial = vec![0.5, 0.5, 0.5];
        assert!(FiniteLatentPomdp::new(s).is_err());
        let mut s = FiniteLatentSpec::three_state(2);
        s.reward_halfwidth = 0.6;
        assert!(FiniteLatentPomdp::new(s).is_err());
    }

    #[test]
    fn reward_density_matches_samples() {
        let m = FiniteLatentPomdp::new(FiniteLatentSpec::three_state(1)).unwrap();
        let x = LatentState(vec![2.0]);
        let mut rng = rng_from_seed(4);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| m.sample_reward(&x, 1, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.6).abs() < 0.005);
        assert!(draws.iter().all(|r| (0.3..=0.9).contains(r)));
        let below = draws.iter().filter(|&&r| r < 0.45).count() as f64 / n as f64;
        // P(B < 0.25) = 3(1/16) - 2(1/64) = 0.15625
        assert!((below - 0.15625).abs() < 0.005);
        let mass: f64 =
            (0..1000).map(|k| m.reward_density(&x, 1, -1.0 + 0.002 * (k as f64 + 0.5)).unwrap() * 0.002).sum();
        assert!((mass - 1.0).abs() < 1e-4);
    }
}
