use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LatentModel, LatentState};
use crate::error::{config_err, Result};
use crate::points::PointSet;
use crate::stats::{gauss_iso, normal_cdf, normal_pdf, sigmoid};

/// Nonlinear Gaussian confounded POMDP with a hidden binary factor.
///
/// Latent state x = (s, g) with g ∈ {0, 1}:
/// g ~ Bernoulli(confounder_prob), s_1 ~ N(initial_state_mean, initial_state_sd²),
/// s_{t+1} = tanh(drift·s_t) + action_effect·u_t + confounder_effect·g + N(0, transition_noise_sd²).
/// With `latent_levels = k ≥ 2` every draw of s is snapped to the nearest of k evenly
/// spaced levels on `level_range`; with `latent_levels = 0` s stays continuous.
/// Observations stack `visible_dim` noisy copies of s and `proxy_dim` noisy copies of
/// s + confounder_effect·g; the measurement m is one more emission of x_1.
/// The default has no binary factor (confounder_prob = 0) and a scalar observation:
/// the logging policy then reads the exact level s that the agent only sees through noise.
/// The logging policy plays u_t = 1 with probability sigmoid(s_t + behavior_bias·g) and
/// rewards are clip(reward_coeffs·(s_t, u_t, g), −1, 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PomdpSpec {
    pub horizon: usize,
    pub visible_dim: usize,
    pub proxy_dim: usize,
    pub confounder_prob: f64,
    pub drift: f64,
    pub action_effect: f64,
    pub confounder_effect: f64,
    pub emission_noise_sd: f64,
    pub transition_noise_sd: f64,
    pub behavior_bias: f64,
    pub reward_coeffs: [f64; 3],
    pub initial_state_mean: f64,
    pub initial_state_sd: f64,
    /// Number of latent levels of s, or 0 for a continuous level.
    pub latent_levels: usize,
    /// Lowest and highest latent level.
    pub level_range: [f64; 2],
    /// Grid size per value of g for the forward filter of the continuous variant.
    pub filter_grid_points: usize,
}

impl Default for PomdpSpec {
    fn default() -> Self {
        Self {
            horizon: 2,
            visible_dim: 1,
            proxy_dim: 0,
            confounder_prob: 0.0,
            drift: 0.8,
            action_effect: 1.0,
            confounder_effect: 1.0,
            emission_noise_sd: 0.5,
            transition_noise_sd: 0.5,
            behavior_bias: 2.0,
            reward_coeffs: [0.5, 0.3, 0.2],
            initial_state_mean: 0.0,
            initial_state_sd: 1.0,
            latent_levels: 5,
            level_range: [-1.0, 3.0],
            filter_grid_points: 161,
        }
    }
}

impl PomdpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return config_err("horizon must be at least 1");
        }
        if self.visible_dim < 1 {
            return config_err("visible_dim and proxy_dim must be positive");
        }
        if !(self.confounder_prob >= 0.0 && self.confounder_prob < 1.0) {
            return config_err(format!("confounder_prob must lie in [0, 1), got {}", self.confounder_prob));
        }
        for (name, v) in [
            ("emission_noise_sd", self.emission_noise_sd),
            ("transition_noise_sd", self.transition_noise_sd),
            ("initial_state_sd", self.initial_state_sd),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return config_err(format!("{name} must be positive and finite, got {v}"));
            }
        }
        let finite = [
            self.drift,
            self.action_effect,
            self.confounder_effect,
            self.behavior_bias,
            self.initial_state_mean,
            self.reward_coeffs[0],
            self.reward_coeffs[1],
            self.reward_coeffs[2],
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return config_err("model coefficients must be finite");
        }
        if self.latent_levels == 1 {
            return config_err("latent_levels must be 0 (continuous) or at least 2");
        }
        if !(self.level_range[0] < self.level_range[1]) || self.level_range.iter().any(|v| !v.is_finite()) {
            return config_err("level_range must be an increasing pair of finite numbers");
        }
        if self.latent_levels == 0 && self.filter_grid_points < 20 {
            return config_err("filter_grid_points must be at least 20");
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.visible_dim + self.proxy_dim
    }
}

/// A validated [`PomdpSpec`] together with its discretized filter.
#[derive(Clone, Debug)]
pub struct GaussianPomdp {
    spec: PomdpSpec,
    grid: Vec<f64>,
    support: Vec<LatentState>,
    means: PointSet,
    prior: Vec<f64>,
    behavior: Vec<f64>,
    /// Transposed row-stochastic grid transition, indexed [u][g].
    transitions_t: [[DMatrix<f64>; 2]; 2],
}

impl GaussianPomdp {
    pub fn new(spec: PomdpSpec) -> Result<Self> {
        spec.validate()?;
        let grid: Vec<f64> = if spec.latent_levels >= 2 {
            let k = spec.latent_levels;
            let [lo, hi] = spec.level_range;
            (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
        } else {
            let n = spec.filter_grid_points;
            let a = spec.action_effect;
            let ce = spec.confounder_effect;
            let mean_lo = -1.0 + a.min(0.0) + ce.min(0.0);
            let mean_hi = 1.0 + a.max(0.0) + ce.max(0.0);
            let lo =
                (spec.initial_state_mean - 6.0 * spec.initial_state_sd).min(mean_lo - 6.0 * spec.transition_noise_sd);
            let hi =
                (spec.initial_state_mean + 6.0 * spec.initial_state_sd).max(mean_hi + 6.0 * spec.transition_noise_sd);
            let step = (hi - lo) / (n - 1) as f64;
            (0..n).map(|i| lo + step * i as f64).collect()
        };

        let mut support = Vec::with_capacity(2 * grid.len());
        let mut prior = Vec::with_capacity(2 * grid.len());
        let initial = Self::level_probs(&grid, spec.latent_levels >= 2, spec.initial_state_mean, spec.initial_state_sd);
        // g = 1 is left out of the state space when it has no mass
        let groups = if spec.confounder_prob > 0.0 { 2 } else { 1 };
        for g in 0..groups {
            let pg = if g == 1 { spec.confounder_prob } else { 1.0 - spec.confounder_prob };
            for (i, &s) in grid.iter().enumerate() {
                support.push(LatentState(vec![s, g as f64]));
                prior.push(pg * initial[i]);
            }
        }

        let mut model = Self {
            spec,
            grid,
            support,
            means: PointSet::new(1),
            prior,
            behavior: Vec::new(),
            transitions_t: Default::default(),
        };
        let d = model.spec.obs_dim();
        let mut means = PointSet::with_capacity(d, model.support.len());
        for x in &model.support {
            means.push(&model.emission_mean(x));
        }
        model.means = means;
        model.behavior = model.support.iter().map(|x| model.behavior_prob(x)).collect();
        for u in 0..2 {
            for g in 0..2 {
                model.transitions_t[u][g] = model.grid_transition(u as u8, g as f64);
            }
        }
        Ok(model)
    }

    pub fn spec(&self) -> &PomdpSpec {
        &self.spec
    }

    fn next_mean(&self, s: f64, g: f64, u: u8) -> f64 {
        (self.spec.drift * s).tanh() + self.spec.action_effect * f64::from(u) + self.spec.confounder_effect * g
    }

    fn discrete(&self) -> bool {
        self.spec.latent_levels >= 2
    }

    /// Probabilities of the grid points for N(mean, sd²): exact bin masses of the
    /// nearest-level snap for discrete levels, normalized densities otherwise.
    fn level_probs(grid: &[f64], discrete: bool, mean: f64, sd: f64) -> Vec<f64> {
        if discrete {
            let n = grid.len();
            (0..n)
                .map(|i| {
                    let lo = if i == 0 { f64::NEG_INFINITY } else { 0.5 * (grid[i - 1] + grid[i]) };
                    let hi = if i + 1 == n { f64::INFINITY } else { 0.5 * (grid[i] + grid[i + 1]) };
                    normal_cdf((hi - mean) / sd) - normal_cdf((lo - mean) / sd)
                })
                .collect()
        } else {
            let dens: Vec<f64> = grid.iter().map(|&s| normal_pdf(s, mean, sd)).collect();
            let total: f64 = dens.iter().sum();
            dens.into_iter().map(|v| v / total).collect()
        }
    }

    fn snap(&self, s: f64) -> f64 {
        if !self.discrete() {
            return s;
        }
        let [lo, hi] = self.spec.level_range;
        let step = (hi - lo) / (self.grid.len() - 1) as f64;
        let i = ((s - lo) / step).round().clamp(0.0, (self.grid.len() - 1) as f64) as usize;
        self.grid[i]
    }

    fn grid_transition(&self, u: u8, g: f64) -> DMatrix<f64> {
        let n = self.grid.len();
        let mut t = DMatrix::zeros(n, n);
        for (i, &s) in self.grid.iter().enumerate() {
            let row =
                Self::level_probs(&self.grid, self.discrete(), self.next_mean(s, g, u), self.spec.transition_noise_sd);
            for (j, v) in row.into_iter().enumerate() {
                // stored transposed so that propagation is a plain matrix-vector product
                t[(j, i)] = v;
            }
        }
        t
    }

    /// Latent levels (the filter grid for the continuous variant).
    pub fn levels(&self) -> &[f64] {
        &self.grid
    }
}

impl LatentModel for GaussianPomdp {
    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn obs_dim(&self) -> usize {
        self.spec.obs_dim()
    }

    fn emission_sd(&self) -> f64 {
        self.spec.emission_noise_sd
    }

    fn emission_mean(&self, x: &LatentState) -> Vec<f64> {
        let (s, g) = (x.0[0], x.0[1]);
        let mut e = vec![s; self.spec.visible_dim];
        e.extend(std::iter::repeat_n(s + g * self.spec.confounder_effect, self.spec.proxy_dim));
        e
    }

    fn behavior_prob(&self, x: &LatentState) -> f64 {
        sigmoid(x.0[0] + self.spec.behavior_bias * x.0[1])
    }

    fn sample_initial(&self, rng: &mut ChaCha8Rng) -> LatentState {
        let g = f64::from(u8::from(rng.random::<f64>() < self.spec.confounder_prob));
        let s = self.spec.initial_state_mean + self.spec.initial_state_sd * rng.sample::<f64, _>(StandardNormal);
        LatentState(vec![self.snap(s), g])
    }

    fn sample_transition(&self, x: &LatentState, u: u8, rng: &mut ChaCha8Rng) -> LatentState {
        let (s, g) = (x.0[0], x.0[1]);
        let s2 = self.next_mean(s, g, u) + self.spec.transition_noise_sd * rng.sample::<f64, _>(StandardNormal);
        LatentState(vec![self.snap(s2), g])
    }

    fn sample_reward(&self, x: &LatentState, u: u8, _rng: &mut ChaCha8Rng) -> f64 {
        let c = self.spec.reward_coeffs;
        (c[0] * x.0[0] + c[1] * f64::from(u) + c[2] * x.0[1]).clamp(-1.0, 1.0)
    }

    fn reward_density(&self, _x: &LatentState, _u: u8, _r: f64) -> Option<f64> {
        // rewards are a deterministic function of the latent state
        None
    }

    fn next_obs_density(&self, x: &LatentState, u: u8, y_next: &[f64]) -> f64 {
        if self.discrete() {
            let (s, g) = (x.0[0], x.0[1]);
            let probs = Self::level_probs(&self.grid, true, self.next_mean(s, g, u), self.spec.transition_noise_sd);
            return probs
                .iter()
                .zip(&self.grid)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, &s2)| {
                    p * gauss_iso(y_next, &self.emission_mean(&LatentState(vec![s2, g])), self.spec.emission_noise_sd)
                })
                .sum();
        }
        // y' = s'·1 + g·ce·p + ε with s' ~ N(μ', σ_t²): covariance σ_e² I + σ_t² 11ᵀ.
        let (s, g) = (x.0[0], x.0[1]);
        let mu = self.next_mean(s, g, u);
        let d = y_next.len() as f64;
        let se2 = self.spec.emission_noise_sd.powi(2);
        let st2 = self.spec.transition_noise_sd.powi(2);
        let mut sum_sq = 0.0;
        let mut sum = 0.0;
        for (k, &y) in y_next.iter().enumerate() {
            let mean = if k < self.spec.visible_dim { mu } else { mu + g * self.spec.confounder_effect };
            let v = y - mean;
            sum_sq += v * v;
            sum += v;
        }
        let quad = (sum_sq - st2 / (se2 + d * st2) * sum * sum) / se2;
        let log_det = d * se2.ln() + (1.0 + d * st2 / se2).ln();
        (-0.5 * (quad + log_det + d * (2.0 * std::f64::consts::PI).ln())).exp()
    }

    fn filter_support(&self) -> &[LatentState] {
        &self.support
    }

    fn filter_emission_means(&self) -> &PointSet {
        &self.means
    }

    fn filter_prior(&self) -> &[f64] {
        &self.prior
    }

    fn filter_behavior(&self) -> &[f64] {
        &self.behavior
    }

    fn has_finite_latent(&self) -> bool {
        self.discrete()
    }

    fn filter_propagate(&self, weights: &[f64], u: u8) -> Vec<f64> {
        let n = self.grid.len();
        let mut out = Vec::with_capacity(weights.len());
        for g in 0..weights.len() / n {
            let w = DVector::from_column_slice(&weights[g * n..(g + 1) * n]);
            let next = &self.transitions_t[usize::from(u)][g] * w;
            out.extend_from_slice(next.as_slice());
        }
        out
    }
}
