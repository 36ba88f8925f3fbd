//! Synthetic confounded POMDPs: episode sampling, CMR extraction and the
//! ground-truth oracles (do-interventions, true conditional laws) used to score
//! and diagnose the estimators.

mod exact;
mod finite;
mod gaussian;
mod oracle;

pub use exact::ExactBridge;
pub use finite::{FiniteBridge, FiniteLatentPomdp, FiniteLatentSpec};
pub use gaussian::{GaussianPomdp, PomdpSpec};
pub use oracle::{
    do_transition_oracle, observational_transition_mean, sample_conditional, ConditionalTarget, ContextOracle,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{range_err, Error, Result};
use crate::points::PointSet;
use crate::rng::stream_rng;

/// Model-specific coordinates of a latent state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState(pub Vec<f64>);

/// One simulated trajectory including its hidden states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub m: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub u: Vec<u8>,
    pub r: Vec<f64>,
    pub hidden_states: Vec<LatentState>,
}

/// The part of an episode an estimator is allowed to see.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedEpisode {
    pub m: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub u: Vec<u8>,
    pub r: Vec<f64>,
}

impl Episode {
    pub fn horizon(&self) -> usize {
        self.y.len()
    }

    pub fn observed(&self) -> ObservedEpisode {
        ObservedEpisode { m: self.m.clone(), y: self.y.clone(), u: self.u.clone(), r: self.r.clone() }
    }
}

pub fn observed(episodes: &[Episode]) -> Vec<ObservedEpisode> {
    episodes.iter().map(Episode::observed).collect()
}

/// A confounded POMDP with isotropic Gaussian emissions `y ~ N(e(x), σ² I)` and a
/// latent-only behavior policy, exposed through primitive sampling steps and a
/// discretized forward filter.
pub trait LatentModel: Send + Sync {
    fn horizon(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn emission_sd(&self) -> f64;
    fn emission_mean(&self, x: &LatentState) -> Vec<f64>;
    /// P(U = 1 | X = x) under the logging policy.
    fn behavior_prob(&self, x: &LatentState) -> f64;
    fn sample_initial(&self, rng: &mut ChaCha8Rng) -> LatentState;
    fn sample_transition(&self, x: &LatentState, u: u8, rng: &mut ChaCha8Rng) -> LatentState;
    fn sample_reward(&self, x: &LatentState, u: u8, rng: &mut ChaCha8Rng) -> f64;
    /// Density of R given (x, u); `None` when the reward law has no density.
    fn reward_density(&self, x: &LatentState, u: u8, r: f64) -> Option<f64>;
    /// Density of the next observation Y' given (x, u), latent transition integrated out.
    fn next_obs_density(&self, x: &LatentState, u: u8, y_next: &[f64]) -> f64;

    /// Support points of the discretized latent space used by the filter.
    fn filter_support(&self) -> &[LatentState];
    /// Emission means of the support points (one row per point).
    fn filter_emission_means(&self) -> &PointSet;
    /// Prior weights of X_1 over the support.
    fn filter_prior(&self) -> &[f64];
    /// Logging-policy P(U = 1 | x) at each support point.
    fn filter_behavior(&self) -> &[f64];
    /// Unnormalized weights of X_{t+1} given weights of X_t and action u.
    fn filter_propagate(&self, weights: &[f64], u: u8) -> Vec<f64>;
    /// True when the filter support is the exact latent space rather than a discretization.
    fn has_finite_latent(&self) -> bool {
        false
    }

    fn sample_emission(&self, x: &LatentState, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let sd = self.emission_sd();
        let mut y = self.emission_mean(x);
        for v in &mut y {
            *v += sd * rng.sample::<f64, _>(StandardNormal);
        }
        y
    }
}

fn sample_episode(model: &dyn LatentModel, rng: &mut ChaCha8Rng) -> Episode {
    let t_max = model.horizon();
    let mut x = model.sample_initial(rng);
    let m = model.sample_emission(&x, rng);
    let mut ep = Episode {
        m,
        y: Vec::with_capacity(t_max),
        u: Vec::with_capacity(t_max),
        r: Vec::with_capacity(t_max),
        hidden_states: Vec::with_capacity(t_max),
    };
    for t in 0..t_max {
        let y = model.sample_emission(&x, rng);
        let u = u8::from(rng.random::<f64>() < model.behavior_prob(&x));
        let r = model.sample_reward(&x, u, rng);
        ep.y.push(y);
        ep.u.push(u);
        ep.r.push(r);
        if t + 1 < t_max {
            let next = model.sample_transition(&x, u, rng);
            ep.hidden_states.push(std::mem::replace(&mut x, next));
        } else {
            ep.hidden_states.push(x.clone());
        }
    }
    ep
}

/// `n_episodes` logged episodes; episode `i` uses its own stream of `seed`.
pub fn sample_dataset(model: &dyn LatentModel, n_episodes: usize, seed: u64) -> Vec<Episode> {
    (0..n_episodes).map(|i| sample_episode(model, &mut stream_rng(seed, i as u64))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmrKind {
    /// Z = (R_t, Y_t).
    Reward,
    /// Z = (Y_{t+1}, Y_t).
    Transition,
}

/// Context dimension at stage `t` (1-based) for observations of dimension `obs_dim`.
pub fn context_dim(t: usize, obs_dim: usize) -> usize {
    (t - 1) * (obs_dim + 1) + 1 + obs_dim
}

/// Stage implied by a context dimension, if any.
pub fn stage_of_context(dim: usize, obs_dim: usize) -> Result<usize> {
    let base = 1 + obs_dim;
    if dim < base || (dim - base) % (obs_dim + 1) != 0 {
        return range_err(format!("context dimension {dim} matches no stage for observations of dimension {obs_dim}"));
    }
    Ok((dim - base) / (obs_dim + 1) + 1)
}

/// A context vector split into its pieces.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedContext<'a> {
    pub stage: usize,
    pub history: Vec<(&'a [f64], u8)>,
    pub action: u8,
    pub m: &'a [f64],
}

fn action_from(v: f64) -> Result<u8> {
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        range_err(format!("action coordinate must be 0 or 1, got {v}"))
    }
}

pub fn parse_context(c: &[f64], obs_dim: usize) -> Result<ParsedContext<'_>> {
    let stage = stage_of_context(c.len(), obs_dim)?;
    let mut history = Vec::with_capacity(stage - 1);
    let mut pos = 0;
    for _ in 1..stage {
        let y = &c[pos..pos + obs_dim];
        let u = action_from(c[pos + obs_dim])?;
        history.push((y, u));
        pos += obs_dim + 1;
    }
    let action = action_from(c[pos])?;
    let m = &c[pos + 1..];
    Ok(ParsedContext { stage, history, action, m })
}

/// Builds c = (y_1, u_1, ..., y_{t-1}, u_{t-1}, u_t, m).
pub fn build_context(history: &[(&[f64], u8)], action: u8, m: &[f64]) -> Vec<f64> {
    let mut c = Vec::new();
    for (y, u) in history {
        c.extend_from_slice(y);
        c.push(f64::from(*u));
    }
    c.push(f64::from(action));
    c.extend_from_slice(m);
    c
}

/// One (w, c, z) triple.
#[derive(Clone, Debug, PartialEq)]
pub struct CmrSample {
    pub w: Vec<f64>,
    pub c: Vec<f64>,
    pub z: Vec<f64>,
}

/// The samples of one bridge equation at one stage, stored column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct CmrDataset {
    pub stage: usize,
    pub kind: CmrKind,
    pub w: PointSet,
    pub c: PointSet,
    pub z: PointSet,
}

impl CmrDataset {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn sample(&self, i: usize) -> CmrSample {
        CmrSample { w: self.w.row(i).to_vec(), c: self.c.row(i).to_vec(), z: self.z.row(i).to_vec() }
    }

    /// Keeps the first `n` samples.
    pub fn truncated(&self, n: usize) -> CmrDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        CmrDataset {
            stage: self.stage,
            kind: self.kind,
            w: self.w.select(&idx),
            c: self.c.select(&idx),
            z: self.z.select(&idx),
        }
    }
}

/// Extracts the stage-`t` CMR triples (1-based `t`) of one bridge equation.
pub fn extract_cmr(episodes: &[ObservedEpisode], t: usize, kind: CmrKind) -> Result<CmrDataset> {
    let Some(first) = episodes.first() else {
        return Err(Error::Degenerate("cannot extract CMR samples from zero episodes".into()));
    };
    let horizon = first.y.len();
    let last = match kind {
        CmrKind::Reward => horizon,
        CmrKind::Transition => horizon.saturating_sub(1),
    };
    if t < 1 || t > last {
        return range_err(format!("stage {t} is outside 1..={last} for {kind:?} bridges with horizon {horizon}"));
    }
    let d = first.m.len();
    let z_dim = match kind {
        CmrKind::Reward => 1 + d,
        CmrKind::Transition => 2 * d,
    };
    let n = episodes.len();
    let mut w = PointSet::with_capacity(1 + d, n);
    let mut c = PointSet::with_capacity(context_dim(t, d), n);
    let mut z = PointSet::with_capacity(z_dim, n);
    let mut buf = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        if ep.y.len() != horizon || ep.u.len() != horizon || ep.r.len() != horizon {
            return range_err(format!("episode {i} has inconsistent sequence lengths"));
        }
        if ep.m.len() != d || ep.y.iter().any(|y| y.len() != d) {
            return range_err(format!("episode {i} has inconsistent observation dimensions"));
        }
        let s = t - 1;
        buf.clear();
        buf.push(f64::from(ep.u[s]));
        buf.extend_from_slice(&ep.y[s]);
        w.push(&buf);

        let hist: Vec<(&[f64], u8)> = (0..s).map(|j| (ep.y[j].as_slice(), ep.u[j])).collect();
        c.push(&build_context(&hist, ep.u[s], &ep.m));

        buf.clear();
        match kind {
            CmrKind::Reward => buf.push(ep.r[s]),
            CmrKind::Transition => buf.extend_from_slice(&ep.y[s + 1]),
        }
        buf.extend_from_slice(&ep.y[s]);
        z.push(&buf);
    }
    Ok(CmrDataset { stage: t, kind, w, c, z })
}

/// Record written by the episode export: hidden states only on request.
#[derive(Serialize)]
pub struct EpisodeRecord<'a> {
    pub m: &'a [f64],
    pub y: &'a [Vec<f64>],
    pub u: &'a [u8],
    pub r: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_states: Option<Vec<&'a [f64]>>,
}

impl<'a> EpisodeRecord<'a> {
    pub fn new(ep: &'a Episode, with_latents: bool) -> Self {
        Self {
            m: &ep.m,
            y: &ep.y,
            u: &ep.u,
            r: &ep.r,
            hidden_states: with_latents.then(|| ep.hidden_states.iter().map(|x| x.0.as_slice()).collect()),
        }
    }
}
