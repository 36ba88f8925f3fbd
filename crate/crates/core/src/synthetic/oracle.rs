//! Ground truth derived from the simulator: exact conditional laws given an
//! observable context (through the discretized forward filter), conditional
//! sampling, and do-intervention Monte Carlo.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{parse_context, sample_dataset, CmrKind, LatentModel, LatentState};
use crate::error::{config_err, range_err, Error, Result};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::points::PointSet;
use crate::rng::{rng_from_seed, stream_rng};
use crate::stats::{gauss_iso, McEstimate};

/// Posterior weights below this fraction of the largest weight are dropped.
const PRUNE_RATIO: f64 = 1e-14;

/// Which conditional law to sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionalTarget {
    WGivenC,
    ZGivenC(CmrKind),
}

/// Latent posterior at stage t given an observable context c, with the exact
/// conditional laws of W and Z that follow from it.
#[derive(Clone)]
pub struct ContextOracle<'a> {
    model: &'a dyn LatentModel,
    stage: usize,
    action: u8,
    support: Vec<usize>,
    weights: Vec<f64>,
}

impl std::fmt::Debug for ContextOracle<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContextOracle")
            .field("stage", &self.stage)
            .field("action", &self.action)
            .field("support", &self.support.len())
            .finish()
    }
}

fn reweight(log_w: &mut [f64], add: impl Fn(usize) -> f64) -> Result<Vec<f64>> {
    let mut max = f64::NEG_INFINITY;
    for (i, lw) in log_w.iter_mut().enumerate() {
        *lw += add(i);
        max = max.max(*lw);
    }
    if !max.is_finite() {
        return Err(Error::Degenerate("context has zero probability under the model".into()));
    }
    let w: Vec<f64> = log_w.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

impl<'a> ContextOracle<'a> {
    pub fn new(model: &'a dyn LatentModel, c: &[f64]) -> Result<Self> {
        let d = model.obs_dim();
        let ctx = parse_context(c, d)?;
        if ctx.stage > model.horizon() {
            return range_err(format!("context of stage {} exceeds horizon {}", ctx.stage, model.horizon()));
        }
        let means = model.filter_emission_means();
        let behavior = model.filter_behavior();
        let sd = model.emission_sd();
        let inv2s2 = 0.5 / (sd * sd);
        let log_emit = |y: &[f64], i: usize| -> f64 {
            -inv2s2 * y.iter().zip(means.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let log_act = |u: u8, i: usize| -> f64 {
            let p = behavior[i];
            if u == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        };

        let mut log_w: Vec<f64> = model.filter_prior().iter().map(|p| p.ln()).collect();
        let mut w = reweight(&mut log_w, |i| log_emit(ctx.m, i))?;
        for &(y, u) in &ctx.history {
            let mut lw: Vec<f64> = w.iter().map(|v| v.ln()).collect();
            w = reweight(&mut lw, |i| log_emit(y, i) + log_act(u, i))?;
            let next = model.filter_propagate(&w, u);
            let total: f64 = next.iter().sum();
            w = next.into_iter().map(|v| v / total).collect();
        }
        let mut lw: Vec<f64> = w.iter().map(|v| v.ln()).collect();
        let w = reweight(&mut lw, |i| log_act(ctx.action, i))?;

        let max = w.iter().copied().fold(0.0, f64::max);
        let support: Vec<usize> = (0..w.len()).filter(|&i| w[i] > PRUNE_RATIO * max).collect();
        let total: f64 = support.iter().map(|&i| w[i]).sum();
        let weights = support.iter().map(|&i| w[i] / total).collect();
        Ok(Self { model, stage: ctx.stage, action: ctx.action, support, weights })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn action(&self) -> u8 {
        self.action
    }

    /// (latent state, posterior probability) pairs with non-negligible weight.
    pub fn posterior(&self) -> impl Iterator<Item = (&LatentState, f64)> + '_ {
        let sup = self.model.filter_support();
        self.support.iter().zip(&self.weights).map(move |(&i, &w)| (&sup[i], w))
    }

    /// E[Y_t | C = c].
    pub fn observation_mean(&self) -> Vec<f64> {
        let means = self.model.filter_emission_means();
        let mut out = vec![0.0; self.model.obs_dim()];
        for (&i, &w) in self.support.iter().zip(&self.weights) {
            for (o, e) in out.iter_mut().zip(means.row(i)) {
                *o += w * e;
            }
        }
        out
    }

    fn check_z(&self, kind: CmrKind, z: &[f64]) -> Result<()> {
        let d = self.model.obs_dim();
        let expected = match kind {
            CmrKind::Transition => {
                if self.stage >= self.model.horizon() {
                    return range_err(format!("no transition law at final stage {}", self.stage));
                }
                2 * d
            }
            CmrKind::Reward => 1 + d,
        };
        if z.len() != expected {
            return range_err(format!("z has dimension {} but {kind:?} needs {expected}", z.len()));
        }
        Ok(())
    }

    /// True conditional density p(z | c).
    pub fn cond_density(&self, kind: CmrKind, z: &[f64]) -> Result<f64> {
        self.check_z(kind, z)?;
        let d = self.model.obs_dim();
        let sd = self.model.emission_sd();
        let means = self.model.filter_emission_means();
        let sup = self.model.filter_support();
        let u = self.action;
        let mut total = 0.0;
        for (&i, &w) in self.support.iter().zip(&self.weights) {
            let x = &sup[i];
            let (y_t, rest) = match kind {
                CmrKind::Transition => (&z[d..], self.model.next_obs_density(x, u, &z[..d])),
                CmrKind::Reward => {
                    let r = self
                        .model
                        .reward_density(x, u, z[0])
                        .ok_or_else(|| Error::Config("the reward law of this model has no density".into()))?;
                    (&z[1..], r)
                }
            };
            if rest > 0.0 {
                total += w * gauss_iso(y_t, means.row(i), sd) * rest;
            }
        }
        Ok(total)
    }

    fn check_kernel(&self, kernel: &KernelSpec) -> Result<()> {
        match kernel.family {
            KernelFamily::Gaussian => Ok(()),
        }
    }

    /// ⟨μ⁰(c), φ(p)⟩ = E[k_W(p, W) | C = c] for every point p, in closed form.
    pub fn kernel_means(&self, kernel: &KernelSpec, points: &PointSet) -> Result<Vec<f64>> {
        self.check_kernel(kernel)?;
        let d = self.model.obs_dim();
        if points.dim() != 1 + d {
            return range_err(format!("W points have dimension {} but expected {}", points.dim(), 1 + d));
        }
        let h2 = kernel.bandwidth * kernel.bandwidth;
        let s2 = self.model.emission_sd().powi(2);
        let scale = (h2 / (h2 + s2)).powf(0.5 * d as f64);
        let inv = 0.5 / (h2 + s2);
        let means = self.model.filter_emission_means();
        let u = f64::from(self.action);
        let mut out = Vec::with_capacity(points.len());
        for p in points.iter() {
            let du = p[0] - u;
            let act = (-du * du / (2.0 * h2)).exp();
            if act < 1e-300 {
                out.push(0.0);
                continue;
            }
            let y = &p[1..];
            let mut acc = 0.0;
            for (&i, &w) in self.support.iter().zip(&self.weights) {
                let e = means.row(i);
                let d2: f64 = y.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                acc += w * (-d2 * inv).exp();
            }
            out.push(act * scale * acc);
        }
        Ok(out)
    }

    /// ‖μ⁰(c)‖² = E[k_W(W, W') | C = c] for independent conditional copies W, W'.
    pub fn kernel_mean_sq(&self, kernel: &KernelSpec) -> Result<f64> {
        self.check_kernel(kernel)?;
        let d = self.model.obs_dim();
        let h2 = kernel.bandwidth * kernel.bandwidth;
        let s2 = self.model.emission_sd().powi(2);
        let scale = (h2 / (h2 + 2.0 * s2)).powf(0.5 * d as f64);
        let inv = 0.5 / (h2 + 2.0 * s2);
        let means = self.model.filter_emission_means();
        let mut acc = 0.0;
        for (a, (&i, &wi)) in self.support.iter().zip(&self.weights).enumerate() {
            acc += wi * wi;
            for (&j, &wj) in self.support.iter().zip(&self.weights).skip(a + 1) {
                let d2: f64 = means.row(i).iter().zip(means.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                acc += 2.0 * wi * wj * (-d2 * inv).exp();
            }
        }
        Ok(scale * acc)
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> &LatentState {
        let v: f64 = rng.random();
        let mut acc = 0.0;
        let sup = self.model.filter_support();
        for (&i, &w) in self.support.iter().zip(&self.weights) {
            acc += w;
            if v < acc {
                return &sup[i];
            }
        }
        &sup[*self.support.last().expect("posterior support is never empty")]
    }

    /// One draw from the conditional law of W or Z given c.
    pub fn sample_one(&self, target: ConditionalTarget, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let x = self.pick(rng);
        let y = self.model.sample_emission(x, rng);
        let u = self.action;
        Ok(match target {
            ConditionalTarget::WGivenC => [vec![f64::from(u)], y].concat(),
            ConditionalTarget::ZGivenC(kind) => {
                self.check_z(kind, &vec![0.0; if kind == CmrKind::Transition { 2 * y.len() } else { 1 + y.len() }])?;
                match kind {
                    CmrKind::Transition => {
                        let x2 = self.model.sample_transition(x, u, rng);
                        [self.model.sample_emission(&x2, rng), y].concat()
                    }
                    CmrKind::Reward => [vec![self.model.sample_reward(x, u, rng)], y].concat(),
                }
            }
        })
    }

    pub fn sample(&self, target: ConditionalTarget, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        (0..n).map(|_| self.sample_one(target, rng)).collect()
    }
}

/// `n_mc` i.i.d. draws from the true conditional law of W or Z given the context `c`.
pub fn sample_conditional(
    model: &dyn LatentModel,
    c: &[f64],
    target: ConditionalTarget,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let oracle = ContextOracle::new(model, c)?;
    oracle.sample(target, n_mc, &mut rng_from_seed(seed))
}

const MC_BLOCK: usize = 10_000;

/// Mean of the first visible coordinate of Y_2 when U_1 is forced to `u`
/// independently of the latent state.
pub fn do_transition_oracle(model: &dyn LatentModel, u: u8, n_mc: usize, seed: u64) -> Result<McEstimate> {
    if model.horizon() < 2 {
        return range_err("the do-intervention oracle needs horizon at least 2");
    }
    if n_mc == 0 {
        return config_err("n_mc must be positive");
    }
    let blocks = n_mc.div_ceil(MC_BLOCK);
    let partial: Vec<(f64, f64)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            let count = MC_BLOCK.min(n_mc - b * MC_BLOCK);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let x1 = model.sample_initial(&mut rng);
                let x2 = model.sample_transition(&x1, u, &mut rng);
                let v = model.sample_emission(&x2, &mut rng)[0];
                s += v;
                s2 += v * v;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = partial.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    Ok(McEstimate::from_moments(s, s2, n_mc))
}

/// Observational E[vis(Y_2) | U_1 = u] from `n_episodes` logged episodes.
pub fn observational_transition_mean(
    model: &dyn LatentModel,
    u: u8,
    n_episodes: usize,
    seed: u64,
) -> Result<McEstimate> {
    if model.horizon() < 2 {
        return range_err("the observational transition mean needs horizon at least 2");
    }
    let eps = sample_dataset(model, n_episodes, seed);
    let vals: Vec<f64> = eps.iter().filter(|e| e.u[0] == u).map(|e| e.y[1][0]).collect();
    Ok(McEstimate::from_samples(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{
        build_context, extract_cmr, observed, FiniteLatentPomdp, FiniteLatentSpec, GaussianPomdp, PomdpSpec,
    };

    /// Observation with a proxy coordinate and a binary hidden factor.
    fn proxied() -> PomdpSpec {
        PomdpSpec { proxy_dim: 1, confounder_prob: 0.5, ..PomdpSpec::default() }
    }

    fn combined(a: &McEstimate, b: &McEstimate) -> f64 {
        (a.stderr * a.stderr + b.stderr * b.stderr).sqrt()
    }

    #[test]
    fn null_action_effect_gives_equal_interventions() {
        let m = GaussianPomdp::new(PomdpSpec { action_effect: 0.0, ..PomdpSpec::default() }).unwrap();
        let a = do_transition_oracle(&m, 0, 100_000, 1).unwrap();
        let b = do_transition_oracle(&m, 1, 100_000, 2).unwrap();
        assert!((a.mean - b.mean).abs() < 3.0 * combined(&a, &b));
    }

    #[test]
    fn oracle_is_self_consistent_across_sizes() {
        let m = GaussianPomdp::new(PomdpSpec { latent_levels: 0, ..proxied() }).unwrap();
        let big = do_transition_oracle(&m, 1, 1_000_000, 5).unwrap();
        let small = do_transition_oracle(&m, 1, 10_000, 6).unwrap();
        assert!((big.mean - small.mean).abs() < 3.0 * combined(&big, &small));
        // E[tanh(0.8 s1)] = 0 by symmetry, so the target is action_effect + confounder_effect·p
        assert!((big.mean - 1.5).abs() < 3.0 * big.stderr);
    }

    #[test]
    fn no_confounding_collapses_do_to_observational() {
        // the logging policy also reads s_1, so drift must vanish too for the collapse
        let m = GaussianPomdp::new(PomdpSpec { confounder_effect: 0.0, drift: 0.0, ..PomdpSpec::default() }).unwrap();
        for u in 0..2 {
            let d = do_transition_oracle(&m, u, 400_000, 30 + u64::from(u)).unwrap();
            let o = observational_transition_mean(&m, u, 200_000, 40 + u64::from(u)).unwrap();
            assert!((d.mean - o.mean).abs() < 3.0 * combined(&d, &o), "u={u}: {d:?} vs {o:?}");
        }
    }

    #[test]
    fn confounding_is_visible_in_the_default_model() {
        let m = GaussianPomdp::new(PomdpSpec::default()).unwrap();
        let gaps: Vec<bool> = (0..2u8)
            .map(|u| {
                let d = do_transition_oracle(&m, u, 200_000, 50 + u64::from(u)).unwrap();
                let o = observational_transition_mean(&m, u, 100_000, 60 + u64::from(u)).unwrap();
                (d.mean - o.mean).abs() > 3.0 * combined(&d, &o)
            })
            .collect();
        assert!(gaps.iter().any(|&g| g));
    }

    #[test]
    fn empty_conditional_sample() {
        let m = GaussianPomdp::new(proxied()).unwrap();
        let c = build_context(&[], 1, &[0.2, 0.4]);
        assert!(sample_conditional(&m, &c, ConditionalTarget::WGivenC, 0, 1).unwrap().is_empty());
        let a = sample_conditional(&m, &c, ConditionalTarget::WGivenC, 5, 1).unwrap();
        assert_eq!(a, sample_conditional(&m, &c, ConditionalTarget::WGivenC, 5, 1).unwrap());
        assert!(matches!(sample_conditional(&m, &[1.0, 0.0], ConditionalTarget::WGivenC, 5, 1), Err(Error::Range(_))));
    }

    /// Averaging the posterior mean of s_1 over the two actions with P(u | m) must
    /// give the conjugate Gaussian posterior mean given m alone.
    #[test]
    fn filter_matches_conjugate_gaussian_update() {
        let spec = PomdpSpec { confounder_effect: 0.0, behavior_bias: 0.0, latent_levels: 0, ..proxied() };
        let m = GaussianPomdp::new(spec).unwrap();
        let mv = [0.7, 0.3];
        let o1 = ContextOracle::new(&m, &build_context(&[], 1, &mv)).unwrap();
        let o0 = ContextOracle::new(&m, &build_context(&[], 0, &mv)).unwrap();
        let post = |o: &ContextOracle| -> (f64, f64) {
            let mut mean = 0.0;
            let mut p1 = 0.0;
            for (x, w) in o.posterior() {
                mean += w * x.0[0];
                p1 += w * crate::stats::sigmoid(x.0[0]);
            }
            (mean, p1)
        };
        let (m1, _) = post(&o1);
        let (m0, _) = post(&o0);
        let s2 = 0.25;
        let prec = 1.0 + 2.0 / s2;
        let cm = (mv[0] + mv[1]) / s2 / prec;
        let csd = (1.0 / prec).sqrt();
        let mut pu = 0.0;
        let h = 1e-3;
        for k in 0..20_000 {
            let s = cm - 10.0 * csd + h * (k as f64 + 0.5) * csd;
            pu += crate::stats::normal_pdf(s, cm, csd) * crate::stats::sigmoid(s) * h * csd;
        }
        let total = pu * m1 + (1.0 - pu) * m0;
        assert!((total - cm).abs() < 1e-6, "{total} vs {cm}");
    }

    #[test]
    fn conditional_draws_match_closed_form_mean() {
        let m = GaussianPomdp::new(proxied()).unwrap();
        let c = build_context(&[(&[0.5, 1.2][..], 1)], 0, &[0.1, 0.9]);
        let o = ContextOracle::new(&m, &c).unwrap();
        let mean = o.observation_mean();
        let draws = o.sample(ConditionalTarget::WGivenC, 40_000, &mut rng_from_seed(3)).unwrap();
        for k in 0..2 {
            let vals: Vec<f64> = draws.iter().map(|w| w[1 + k]).collect();
            let e = McEstimate::from_samples(&vals);
            assert!((e.mean - mean[k]).abs() < 3.0 * e.stderr, "coord {k}: {e:?} vs {}", mean[k]);
        }
        assert!(draws.iter().all(|w| w[0] == 0.0));
    }

    #[test]
    fn kernel_means_match_monte_carlo() {
        let m = GaussianPomdp::new(proxied()).unwrap();
        let c = build_context(&[], 1, &[0.3, 1.1]);
        let o = ContextOracle::new(&m, &c).unwrap();
        let k = KernelSpec::gaussian(0.9).unwrap();
        let probes = PointSet::from_rows(&[vec![1.0, 0.0, 0.5], vec![1.0, 1.0, 2.0], vec![0.0, 0.3, 1.0]]).unwrap();
        let exact = o.kernel_means(&k, &probes).unwrap();
        let mut rng = rng_from_seed(8);
        let draws = o.sample(ConditionalTarget::WGivenC, 50_000, &mut rng).unwrap();
        for (j, p) in probes.iter().enumerate() {
            let vals: Vec<f64> = draws.iter().map(|w| k.eval(p, w)).collect();
            let e = McEstimate::from_samples(&vals);
            assert!((e.mean - exact[j]).abs() < 3.0 * e.stderr + 1e-12, "probe {j}: {e:?} vs {}", exact[j]);
        }
        let draws2 = o.sample(ConditionalTarget::WGivenC, 50_000, &mut rng).unwrap();
        let vals: Vec<f64> = draws.iter().zip(&draws2).map(|(a, b)| k.eval(a, b)).collect();
        let e = McEstimate::from_samples(&vals);
        let sq = o.kernel_mean_sq(&k).unwrap();
        assert!((e.mean - sq).abs() < 3.0 * e.stderr, "{e:?} vs {sq}");
    }

    #[test]
    fn transition_density_matches_draws_and_integrates() {
        let m = FiniteLatentPomdp::new(FiniteLatentSpec::three_state(2)).unwrap();
        let c = build_context(&[], 1, &[0.4]);
        let o = ContextOracle::new(&m, &c).unwrap();
        let h = 0.05;
        let mut mass = 0.0;
        let mut mean_next = 0.0;
        for i in 0..200 {
            for j in 0..200 {
                let z = [-5.0 + h * (i as f64 + 0.5), -5.0 + h * (j as f64 + 0.5)];
                let p = o.cond_density(CmrKind::Transition, &z).unwrap();
                mass += p * h * h;
                mean_next += z[0] * p * h * h;
            }
        }
        assert!((mass - 1.0).abs() < 1e-6);
        let draws = o.sample(ConditionalTarget::ZGivenC(CmrKind::Transition), 50_000, &mut rng_from_seed(2)).unwrap();
        let e = McEstimate::from_samples(&draws.iter().map(|z| z[0]).collect::<Vec<_>>());
        assert!((e.mean - mean_next).abs() < 3.0 * e.stderr);
    }

    #[test]
    fn stage_two_oracle_marginalizes_history_correctly() {
        // compare the filter's p(y_2 | y_1, u_1, u_2, m) against brute-force enumeration
        let model = FiniteLatentPomdp::new(FiniteLatentSpec::three_state(3)).unwrap();
        let spec = model.spec().clone();
        let (m, y1, u1, u2) = (0.2, -0.7, 1u8, 0u8);
        let y_next = 0.9;
        let y2 = 0.1;
        let c = build_context(&[(&[y1][..], u1)], u2, &[m]);
        let o = ContextOracle::new(&model, &c).unwrap();
        let got = o.cond_density(CmrKind::Transition, &[y_next, y2]).unwrap();
        let e = |j: usize, y: f64| crate::stats::normal_pdf(y, spec.emission_means[j][0], spec.emission_sd);
        let pu = |j: usize, u: u8| if u == 1 { spec.behavior[j] } else { 1.0 - spec.behavior[j] };
        let mut num = 0.0;
        let mut den = 0.0;
        for x1 in 0..3 {
            for x2 in 0..3 {
                let w = spec.initial[x1]
                    * e(x1, m)
                    * e(x1, y1)
                    * pu(x1, u1)
                    * spec.transitions[u1 as usize][x1][x2]
                    * pu(x2, u2);
                den += w;
                let next: f64 = (0..3).map(|x3| spec.transitions[u2 as usize][x2][x3] * e(x3, y_next)).sum();
                num += w * e(x2, y2) * next;
            }
        }
        assert!((got - num / den).abs() < 1e-12);
        let eps = observed(&sample_dataset(&model, 5, 1));
        let cmr = extract_cmr(&eps, 2, CmrKind::Reward).unwrap();
        assert!(ContextOracle::new(&model, cmr.c.row(0)).is_ok());
    }
}
