//! Policy value from fitted bridges: stage-wise reward laws by deterministic
//! quadrature over observation histories (horizons up to 3), plus Monte Carlo
//! rollouts of the simulator for ground truth.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{Bridge, TensorGrid};
use crate::error::{config_err, range_err, Result};
use crate::points::PointSet;
use crate::rng::stream_rng;
use crate::stats::{sigmoid, McEstimate};
use crate::synthetic::LatentModel;

/// Longest horizon handled by the history quadrature.
pub const MAX_QUADRATURE_HORIZON: usize = 3;

pub const VALUE_REPORT_SCHEMA_VERSION: u32 = 1;

/// A history-dependent policy over binary actions.
pub trait Policy: Sync {
    fn horizon(&self) -> usize;
    /// π_t(U_t = 1 | y_t, m, h_{t−1}) with `t` 1-based and `history` = ((y_1, u_1), …, (y_{t−1}, u_{t−1})).
    fn prob_one(&self, t: usize, y: &[f64], m: &[f64], history: &[(&[f64], u8)]) -> f64;
    fn uses_measurement(&self) -> bool;
    fn uses_history(&self) -> bool;

    fn prob(&self, u: u8, t: usize, y: &[f64], m: &[f64], history: &[(&[f64], u8)]) -> f64 {
        let p = self.prob_one(t, y, m, history);
        if u == 1 {
            p
        } else {
            1.0 - p
        }
    }
}

/// One stage of a [`LogisticPolicy`]:
/// P(U_t = 1) = sigmoid(bias + y_coeffs·y_t + m_coeffs·m + prev_action·u_{t−1}).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticStage {
    pub bias: f64,
    #[serde(default)]
    pub y_coeffs: Vec<f64>,
    #[serde(default)]
    pub m_coeffs: Vec<f64>,
    #[serde(default)]
    pub prev_action: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticPolicy {
    pub stages: Vec<LogisticStage>,
}

impl LogisticPolicy {
    /// Plays U = 1 with probability `p` at every stage.
    pub fn constant(horizon: usize, p: f64) -> Self {
        let bias = (p / (1.0 - p)).ln();
        Self { stages: vec![LogisticStage { bias, ..Default::default() }; horizon] }
    }

    pub fn validate(&self, obs_dim: usize) -> Result<()> {
        if self.stages.is_empty() {
            return config_err("policy needs at least one stage");
        }
        for (t, s) in self.stages.iter().enumerate() {
            let finite = s.bias.is_finite()
                && s.prev_action.is_finite()
                && s.y_coeffs.iter().chain(&s.m_coeffs).all(|v| v.is_finite());
            if !finite {
                return config_err(format!("policy stage {} has a non-finite coefficient", t + 1));
            }
            for (name, v) in [("y_coeffs", &s.y_coeffs), ("m_coeffs", &s.m_coeffs)] {
                if !v.is_empty() && v.len() != obs_dim {
                    return config_err(format!("policy stage {}: {name} must have {obs_dim} entries", t + 1));
                }
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Policy for LogisticPolicy {
    fn horizon(&self) -> usize {
        self.stages.len()
    }

    fn prob_one(&self, t: usize, y: &[f64], m: &[f64], history: &[(&[f64], u8)]) -> f64 {
        let s = &self.stages[t - 1];
        let prev = history.last().map_or(0.0, |h| f64::from(h.1));
        sigmoid(s.bias + dot(&s.y_coeffs, y) + dot(&s.m_coeffs, m) + s.prev_action * prev)
    }

    fn uses_measurement(&self) -> bool {
        self.stages.iter().any(|s| s.m_coeffs.iter().any(|&v| v != 0.0))
    }

    fn uses_history(&self) -> bool {
        self.stages.iter().skip(1).any(|s| s.prev_action != 0.0)
    }
}

/// Reward bridges b_t^R (one per stage) and transition bridges b_t^D (one per stage but the last).
pub struct BridgeSet {
    pub reward: Vec<Box<dyn Bridge>>,
    pub transition: Vec<Box<dyn Bridge>>,
}

impl BridgeSet {
    pub fn horizon(&self) -> usize {
        self.reward.len()
    }

    fn check(&self, t_max: usize, obs_dim: usize) -> Result<()> {
        if t_max == 0 || t_max > self.reward.len() {
            return range_err(format!("stage {t_max} needs that many reward bridges, have {}", self.reward.len()));
        }
        if t_max > MAX_QUADRATURE_HORIZON {
            return config_err(format!("history quadrature supports horizons up to {MAX_QUADRATURE_HORIZON}"));
        }
        if self.transition.len() + 1 < t_max {
            return range_err(format!("stage {t_max} needs {} transition bridges", t_max - 1));
        }
        for b in &self.reward[..t_max] {
            if b.w_dim() != 1 + obs_dim || b.z_dim() != 1 + obs_dim {
                return range_err("reward bridge dimensions do not match the observation space");
            }
        }
        for b in &self.transition[..t_max - 1] {
            if b.w_dim() != 1 + obs_dim || b.z_dim() != 2 * obs_dim {
                return range_err("transition bridge dimensions do not match the observation space");
            }
        }
        Ok(())
    }
}

/// Integration grids of the value computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSettings {
    pub y_lower: Vec<f64>,
    pub y_upper: Vec<f64>,
    /// Points per observation axis.
    pub y_points: usize,
    pub r_lower: f64,
    pub r_upper: f64,
    pub r_points: usize,
    /// Cap on the measurement samples used when the policy reads m.
    pub max_m_samples: usize,
}

impl QuadratureSettings {
    pub fn new(y_lower: Vec<f64>, y_upper: Vec<f64>, y_points: usize) -> Self {
        Self { y_lower, y_upper, y_points, r_lower: -1.0, r_upper: 1.0, r_points: 81, max_m_samples: 200 }
    }

    pub fn y_grid(&self) -> Result<TensorGrid> {
        if self.y_points < 8 {
            return config_err("observation grid needs at least 8 points per axis");
        }
        TensorGrid::over_box(&self.y_lower, &self.y_upper, self.y_points)
    }

    pub fn r_grid(&self) -> Result<TensorGrid> {
        if self.r_points < 8 {
            return config_err("reward grid needs at least 8 points");
        }
        TensorGrid::over_box(&[self.r_lower], &[self.r_upper], self.r_points)
    }

    /// Same boxes with every grid spacing halved.
    pub fn refined(&self) -> Self {
        Self { y_points: 2 * self.y_points - 1, r_points: 2 * self.r_points - 1, ..self.clone() }
    }
}

fn with_action(u: u8, y: &[f64]) -> Vec<f64> {
    let mut w = Vec::with_capacity(1 + y.len());
    w.push(f64::from(u));
    w.extend_from_slice(y);
    w
}

/// f_t(r, h_t, m): the reward bridge of stage t chained with the transition bridges
/// of the earlier stages, the intermediate twins ỹ_1 … ỹ_{t−1} integrated over `y_grid`
/// and ỹ_0 = m. `history` holds (y_j, u_j) for j = 1..t.
pub fn compose_f_t(
    bridges: &BridgeSet,
    t: usize,
    r: f64,
    history: &[(Vec<f64>, u8)],
    m: &[f64],
    y_grid: &TensorGrid,
) -> Result<f64> {
    let d = m.len();
    bridges.check(t, d)?;
    if history.len() != t || history.iter().any(|(y, _)| y.len() != d) {
        return range_err("history must hold one observation of matching dimension per stage");
    }
    let rz = |ytilde: &[f64]| -> f64 {
        let (y, u) = &history[t - 1];
        let mut z = vec![r];
        z.extend_from_slice(y);
        bridges.reward[t - 1].eval(&with_action(*u, ytilde), &z)
    };
    if t == 1 {
        return Ok(rz(m));
    }
    if y_grid.min_points() < 8 || y_grid.dim() != d {
        return config_err("observation grid needs at least 8 points per axis and the observation dimension");
    }
    let pts = y_grid.points();
    let wts = y_grid.point_weights();
    let trans = |j: usize, prev: &[f64], next: &[f64]| -> f64 {
        let (y, u) = &history[j - 1];
        let mut z = next.to_vec();
        z.extend_from_slice(y);
        bridges.transition[j - 1].eval(&with_action(*u, prev), &z)
    };
    // φ_j(ỹ_j) over the grid, starting from the delta at m
    let mut phi: Vec<f64> = pts.iter().map(|next| trans(1, m, next)).collect();
    for j in 2..t {
        phi = pts
            .iter()
            .map(|next| pts.iter().zip(&phi).zip(&wts).map(|((prev, p), w)| w * p * trans(j, prev, next)).sum())
            .collect();
    }
    Ok(pts.iter().zip(&phi).zip(&wts).map(|((prev, p), w)| w * p * rz(prev)).sum())
}

/// Stage-wise law of R_t on the reward grid and its summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLaw {
    pub stage: usize,
    pub law: Vec<f64>,
    /// ∫ p̂(r) dr over the grid.
    pub mass: f64,
    /// ∫ r p̂(r) dr.
    pub contribution: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueReport {
    pub schema_version: u32,
    pub horizon: usize,
    pub value: f64,
    pub r_grid: Vec<f64>,
    pub stages: Vec<StageLaw>,
    pub quadrature: QuadratureSettings,
    pub m_samples_used: usize,
    pub measurement_averaged: bool,
    pub flags: Vec<String>,
}

struct Tables {
    n_g: usize,
    n_r: usize,
    /// Stage t ≥ 2, action u: entries (ỹ, r, y).
    reward: Vec<[Vec<f64>; 2]>,
    /// Stage t ≥ 2, action u: entries (ỹ_prev, ỹ_next, y).
    transition: Vec<[Vec<f64>; 2]>,
}

struct Slot {
    m: Vec<f64>,
    /// Action u: entries (r, y).
    reward1: [Vec<f64>; 2],
    /// Action u: entries (ỹ_1, y).
    transition1: [Vec<f64>; 2],
}

struct HistState {
    weight: f64,
    hist: Vec<(usize, u8)>,
    phi: Option<Vec<f64>>,
}

fn table_over_grid(b: &dyn Bridge, u: u8, w_pts: &PointSet, z_grid: &TensorGrid) -> Vec<f64> {
    let rows: Vec<Vec<f64>> =
        (0..w_pts.len()).into_par_iter().map(|g| b.eval_grid(&with_action(u, w_pts.row(g)), z_grid)).collect();
    rows.concat()
}

fn averaged_table(b: &dyn Bridge, u: u8, ms: &PointSet, z_grid: &TensorGrid) -> Vec<f64> {
    let mut ws = PointSet::with_capacity(1 + ms.dim(), ms.len());
    for m in ms.iter() {
        ws.push(&with_action(u, m));
    }
    b.eval_grid_averaged(&ws, z_grid)
}

/// p̂^π(r_t) on the reward grid for t = 1..=t_max.
pub fn stage_laws(
    bridges: &BridgeSet,
    policy: &dyn Policy,
    t_max: usize,
    settings: &QuadratureSettings,
    m_samples: &PointSet,
) -> Result<(Vec<Vec<f64>>, usize, bool)> {
    let d = m_samples.dim();
    bridges.check(t_max, d)?;
    if policy.horizon() < t_max {
        return range_err(format!("policy covers {} stages, need {t_max}", policy.horizon()));
    }
    if m_samples.is_empty() {
        return config_err("at least one measurement sample is required");
    }
    if settings.y_lower.len() != d || settings.y_upper.len() != d {
        return range_err("observation box dimension does not match the measurement dimension");
    }
    if settings.max_m_samples == 0 {
        return config_err("max_m_samples must be positive");
    }
    let y_grid = settings.y_grid()?;
    let r_grid = settings.r_grid()?;
    let y_pts = y_grid.points();
    let wy = y_grid.point_weights();
    let ry_grid = r_grid.product(&y_grid);
    let yy_grid = y_grid.product(&y_grid);
    let n_g = y_pts.len();
    let n_r = r_grid.len();

    let tables = Tables {
        n_g,
        n_r,
        reward: (2..=t_max)
            .map(|t| [0u8, 1].map(|u| table_over_grid(bridges.reward[t - 1].as_ref(), u, &y_pts, &ry_grid)))
            .collect(),
        transition: (2..t_max)
            .map(|t| [0u8, 1].map(|u| table_over_grid(bridges.transition[t - 1].as_ref(), u, &y_pts, &yy_grid)))
            .collect(),
    };

    let averaged = !policy.uses_measurement();
    let slot_ms: Vec<PointSet> = if averaged {
        vec![m_samples.clone()]
    } else {
        let n = m_samples.len();
        let k = n.min(settings.max_m_samples);
        (0..k).map(|i| m_samples.select(&[i * n / k])).collect()
    };
    let laws_per_slot: Vec<Vec<Vec<f64>>> = slot_ms
        .par_iter()
        .map(|ms| {
            let mean_m: Vec<f64> = (0..d).map(|k| ms.iter().map(|m| m[k]).sum::<f64>() / ms.len() as f64).collect();
            let slot = Slot {
                m: mean_m,
                reward1: [0u8, 1].map(|u| averaged_table(bridges.reward[0].as_ref(), u, ms, &ry_grid)),
                transition1: if t_max > 1 {
                    [0u8, 1].map(|u| averaged_table(bridges.transition[0].as_ref(), u, ms, &yy_grid))
                } else {
                    [Vec::new(), Vec::new()]
                },
            };
            slot_laws(&slot, &tables, policy, t_max, &y_pts, &wy)
        })
        .collect();
    let used = slot_ms.iter().map(PointSet::len).sum::<usize>().min(m_samples.len());
    let n_slots = laws_per_slot.len() as f64;
    let mut laws = vec![vec![0.0; n_r]; t_max];
    for slot in &laws_per_slot {
        for (acc, l) in laws.iter_mut().zip(slot) {
            for (a, v) in acc.iter_mut().zip(l) {
                *a += v / n_slots;
            }
        }
    }
    Ok((laws, if averaged { m_samples.len() } else { used }, averaged))
}

fn slot_laws(
    slot: &Slot,
    tab: &Tables,
    policy: &dyn Policy,
    t_max: usize,
    y_pts: &PointSet,
    wy: &[f64],
) -> Vec<Vec<f64>> {
    let (n_g, n_r) = (tab.n_g, tab.n_r);
    let markov = !policy.uses_history();
    let mut states = vec![HistState { weight: 1.0, hist: Vec::new(), phi: None }];
    let mut laws = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let mut law = vec![0.0; n_r];
        let mut next: Vec<HistState> = Vec::new();
        let mut merged = vec![0.0; n_g];
        for s in &states {
            let hist: Vec<(&[f64], u8)> = s.hist.iter().map(|&(g, u)| (y_pts.row(g), u)).collect();
            for u in [0u8, 1] {
                // ψ(r, y) = Σ_ỹ w(ỹ) φ(ỹ) R_t[u](ỹ, r, y) and χ(ỹ', y) likewise for the transition
                let psi: Vec<f64> = match &s.phi {
                    None => slot.reward1[usize::from(u)].clone(),
                    Some(phi) => contract_first(&tab.reward[t - 2][usize::from(u)], phi, wy, n_r * n_g),
                };
                let chi: Option<Vec<f64>> = (t < t_max).then(|| match &s.phi {
                    None => slot.transition1[usize::from(u)].clone(),
                    Some(phi) => contract_first(&tab.transition[t - 2][usize::from(u)], phi, wy, n_g * n_g),
                });
                for g in 0..n_g {
                    let c = s.weight * wy[g] * policy.prob(u, t, y_pts.row(g), &slot.m, &hist);
                    if c == 0.0 {
                        continue;
                    }
                    for (r, l) in law.iter_mut().enumerate() {
                        *l += c * psi[r * n_g + g];
                    }
                    if let Some(chi) = &chi {
                        let phi_next = (0..n_g).map(|k| chi[k * n_g + g]);
                        if markov {
                            for (a, v) in merged.iter_mut().zip(phi_next) {
                                *a += c * v;
                            }
                        } else {
                            let mut hist = s.hist.clone();
                            hist.push((g, u));
                            next.push(HistState { weight: c, hist, phi: Some(phi_next.collect()) });
                        }
                    }
                }
            }
        }
        laws.push(law);
        states = if markov { vec![HistState { weight: 1.0, hist: Vec::new(), phi: Some(merged) }] } else { next };
    }
    laws
}

/// Σ_k w_k φ_k T[k, ·] for a table whose first index runs over the observation grid.
fn contract_first(table: &[f64], phi: &[f64], w: &[f64], stride: usize) -> Vec<f64> {
    let mut out = vec![0.0; stride];
    for (k, (p, wk)) in phi.iter().zip(w).enumerate() {
        let c = p * wk;
        if c == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(&table[k * stride..(k + 1) * stride]) {
            *o += c * v;
        }
    }
    out
}

/// p̂^π(r_t) on the reward grid of `settings`.
pub fn reward_marginal(
    bridges: &BridgeSet,
    policy: &dyn Policy,
    t: usize,
    settings: &QuadratureSettings,
    m_samples: &PointSet,
) -> Result<Vec<f64>> {
    let (mut laws, _, _) = stage_laws(bridges, policy, t, settings, m_samples)?;
    Ok(laws.pop().expect("t ≥ 1 laws"))
}

/// V̂(π) = Σ_t ∫ r p̂^π(r_t) dr with the stage laws and normalization diagnostics.
pub fn policy_value(
    bridges: &BridgeSet,
    policy: &dyn Policy,
    settings: &QuadratureSettings,
    m_samples: &PointSet,
) -> Result<ValueReport> {
    let horizon = bridges.horizon();
    let (laws, used, averaged) = stage_laws(bridges, policy, horizon, settings, m_samples)?;
    let r_grid = settings.r_grid()?;
    let rs = r_grid.axis(0).to_vec();
    let wr = r_grid.axis_weights(0);
    let mut flags = Vec::new();
    let stages: Vec<StageLaw> = laws
        .into_iter()
        .enumerate()
        .map(|(i, law)| {
            let mass: f64 = law.iter().zip(wr).map(|(p, w)| p * w).sum();
            let contribution: f64 = law.iter().zip(wr).zip(&rs).map(|((p, w), r)| p * w * r).sum();
            if !(0.9..=1.1).contains(&mass) {
                flags.push(format!("stage {} reward law has mass {mass:.4}", i + 1));
            }
            StageLaw { stage: i + 1, law, mass, contribution }
        })
        .collect();
    let value: f64 = stages.iter().map(|s| s.contribution).sum();
    if value.abs() > horizon as f64 {
        flags.push(format!("value {value:.4} lies outside [-{horizon}, {horizon}]"));
    }
    Ok(ValueReport {
        schema_version: VALUE_REPORT_SCHEMA_VERSION,
        horizon,
        value,
        r_grid: rs,
        stages,
        quadrature: settings.clone(),
        m_samples_used: used,
        measurement_averaged: averaged,
        flags,
    })
}

/// Monte Carlo value of `policy` in the simulator, with per-stage mean rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub value: McEstimate,
    pub stage_means: Vec<f64>,
}

const ROLLOUT_BLOCK: usize = 10_000;

pub fn rollout_value(model: &dyn LatentModel, policy: &dyn Policy, n: usize, seed: u64) -> Result<RolloutReport> {
    let horizon = model.horizon();
    if policy.horizon() < horizon {
        return range_err("policy does not cover the model horizon");
    }
    if n == 0 {
        return config_err("rollout count must be positive");
    }
    let blocks = n.div_ceil(ROLLOUT_BLOCK);
    let partial: Vec<(f64, f64, Vec<f64>)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            let count = ROLLOUT_BLOCK.min(n - b * ROLLOUT_BLOCK);
            let (mut s, mut s2) = (0.0, 0.0);
            let mut stage = vec![0.0; horizon];
            for _ in 0..count {
                let mut x = model.sample_initial(&mut rng);
                let m = model.sample_emission(&x, &mut rng);
                let mut ys: Vec<Vec<f64>> = Vec::with_capacity(horizon);
                let mut us: Vec<u8> = Vec::with_capacity(horizon);
                let mut total = 0.0;
                for t in 0..horizon {
                    let y = model.sample_emission(&x, &mut rng);
                    let hist: Vec<(&[f64], u8)> = ys.iter().map(Vec::as_slice).zip(us.iter().copied()).collect();
                    let u = u8::from(rng.random::<f64>() < policy.prob_one(t + 1, &y, &m, &hist));
                    let r = model.sample_reward(&x, u, &mut rng);
                    stage[t] += r;
                    total += r;
                    if t + 1 < horizon {
                        x = model.sample_transition(&x, u, &mut rng);
                    }
                    ys.push(y);
                    us.push(u);
                }
                s += total;
                s2 += total * total;
            }
            (s, s2, stage)
        })
        .collect();
    let mut s = 0.0;
    let mut s2 = 0.0;
    let mut stage = vec![0.0; horizon];
    for (a, b, st) in &partial {
        s += a;
        s2 += b;
        for (x, y) in stage.iter_mut().zip(st) {
            *x += y;
        }
    }
    Ok(RolloutReport {
        value: McEstimate::from_moments(s, s2, n),
        stage_means: stage.into_iter().map(|v| v / n as f64).collect(),
    })
}
