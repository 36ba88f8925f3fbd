//! Monte Carlo risks of fitted bridges against a simulator's exact conditional laws:
//! the population, intermediate and empirical risks, the stage-one error terms
//! (residual drift, cross-term and their nuisance components), the foldwise identity
//! linking population and intermediate risks, and the comparison with a large-sample
//! comparator fit on true nuisances.
//!
//! Every estimate averages over fresh contexts C from the simulator; each context
//! gets its own reference draws z ~ ν, so per-context averages are i.i.d. and their
//! sample standard error is the reported Monte Carlo error.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{
    choose_atoms, draw_reference, fit_bridge_crossfit, BridgeEstimate, BridgeSystem, ContextEmbedding, CriterionBlock,
    EmbeddingBasis, PreparedFit, RefMeasure,
};
use crate::error::{config_err, Result};
use crate::kernel::{gram_sym, KernelSpec, SpdFactor};
use crate::nuisance::{embedding_inner, Nuisance, NuisanceAt, OracleNuisance};
use crate::points::PointSet;
use crate::rng::{derive_seed, rng_from_seed, tags};
use crate::stats::McEstimate;
use crate::synthetic::{extract_cmr, observed, sample_dataset, CmrKind, ConditionalTarget, ContextOracle, LatentModel};

pub const DIAGNOSTICS_SCHEMA_VERSION: u32 = 1;

/// Independent random streams of one diagnostic seed.
mod stream {
    pub const POPULATION: u64 = 1;
    pub const INTERMEDIATE: u64 = 2;
    pub const PAIRED: u64 = 3;
    pub const DRIFT: u64 = 4;
    pub const EMBEDDING: u64 = 5;
    pub const DENSITY: u64 = 6;
    pub const GAP: u64 = 7;
}

/// Fresh contexts per estimate and reference draws per context.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSizes {
    pub contexts: usize,
    pub draws: usize,
}

impl Default for McSizes {
    fn default() -> Self {
        Self { contexts: 400, draws: 32 }
    }
}

impl McSizes {
    pub fn check(&self) -> Result<()> {
        if self.contexts < 2 || self.draws < 1 {
            return config_err("Monte Carlo sizes need at least 2 contexts and 1 draw");
        }
        Ok(())
    }
}

/// The simulator side of a diagnostic: the model, which bridge equation, the
/// reference measure ν and the W kernel of the fitted nuisances.
pub struct Population<'a> {
    pub model: &'a dyn LatentModel,
    pub stage: usize,
    pub kind: CmrKind,
    pub measure: RefMeasure,
    pub kernel_w: KernelSpec,
}

impl<'a> Population<'a> {
    pub fn oracle(&self) -> OracleNuisance<'a> {
        OracleNuisance { model: self.model, kind: self.kind, kernel_w: self.kernel_w }
    }

    /// Contexts of `n` fresh logged episodes.
    pub fn contexts(&self, n: usize, seed: u64) -> Result<PointSet> {
        let eps = observed(&sample_dataset(self.model, n, seed));
        Ok(extract_cmr(&eps, self.stage, self.kind)?.c)
    }

    /// Per-context averages of `f` over that context's draws, for each of the `q`
    /// quantities `f` returns, as Monte Carlo estimates over contexts.
    fn estimate<F>(&self, sizes: &McSizes, seed: u64, which: u64, q: usize, f: F) -> Result<Vec<McEstimate>>
    where
        F: Fn(usize, &[f64], &PointSet) -> Result<Vec<f64>> + Sync,
    {
        sizes.check()?;
        let base = derive_seed(seed, &[tags::DIAGNOSTICS, which]);
        let cs = self.contexts(sizes.contexts, derive_seed(base, &[0]))?;
        let rows: Vec<Vec<f64>> = (0..cs.len())
            .into_par_iter()
            .map(|i| {
                let zs = draw_reference(&self.measure, sizes.draws, derive_seed(base, &[1, i as u64]));
                f(i, cs.row(i), &zs)
            })
            .collect::<Result<_>>()?;
        Ok((0..q).map(|k| McEstimate::from_samples(&rows.iter().map(|r| r[k]).collect::<Vec<_>>())).collect())
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// ⟨μ(c) ⊗ φ(z), b⟩ at every draw, for the embedding of a nuisance evaluated at c.
fn conditional_means(
    b: &BridgeEstimate,
    nuisance: &dyn Nuisance,
    at: &dyn NuisanceAt,
    zs: &PointSet,
) -> Result<Vec<f64>> {
    let gamma = b.coefficients_from_projection(&b.projections(nuisance, at)?);
    Ok(zs.iter().map(|z| b.contract_z(&gamma, z)).collect())
}

/// r(b, c, z; η) = ⟨μ(c) ⊗ φ(z), b⟩ − p(z | c) at every draw.
fn residuals(b: &BridgeEstimate, nuisance: &dyn Nuisance, c: &[f64], zs: &PointSet) -> Result<Vec<f64>> {
    let at = nuisance.at(c)?;
    let e = conditional_means(b, nuisance, at.as_ref(), zs)?;
    zs.iter().zip(e).map(|(z, v)| Ok(v - at.density(z)?)).collect()
}

/// Population risk L(b) = ∫ E[(E[b(W, z) | C] − p(z | C))²] dν(z) with the true
/// conditional laws; E[b(W, z) | C] comes from the closed-form kernel means.
pub fn population_risk(b: &BridgeEstimate, pop: &Population<'_>, sizes: &McSizes, seed: u64) -> Result<McEstimate> {
    population_risk_on(b, pop, sizes, seed, stream::POPULATION)
}

fn population_risk_on(
    b: &BridgeEstimate,
    pop: &Population<'_>,
    sizes: &McSizes,
    seed: u64,
    which: u64,
) -> Result<McEstimate> {
    let oracle = pop.oracle();
    let est = pop.estimate(sizes, seed, which, 1, |_, c, zs| {
        let r = residuals(b, &oracle, c, zs)?;
        Ok(vec![mean(r.iter().map(|v| v * v))])
    })?;
    Ok(est[0])
}

/// L(b) with E[b(W, z) | C] replaced by an average over `n_w` conditional draws of W.
/// Uses the same contexts and reference draws as [`population_risk`]; the inner
/// average adds a positive bias of order Var(b(W, z) | C) / n_w.
pub fn population_risk_sampled(
    b: &BridgeEstimate,
    pop: &Population<'_>,
    sizes: &McSizes,
    n_w: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_w < 1 {
        return config_err("n_w must be positive");
    }
    let est = pop.estimate(sizes, seed, stream::POPULATION, 1, |i, c, zs| {
        let oracle = ContextOracle::new(pop.model, c)?;
        let mut rng = rng_from_seed(derive_seed(seed, &[tags::DIAGNOSTICS, stream::POPULATION, 2, i as u64]));
        let ws = oracle.sample(ConditionalTarget::WGivenC, n_w, &mut rng)?;
        let basis = &b.basis;
        let v: Vec<f64> = basis.points.iter().map(|x| mean(ws.iter().map(|w| basis.kernel_w.eval(x, w)))).collect();
        let gamma = b.coefficients_from_projection(&basis.project(&v));
        let r: Vec<f64> = zs
            .iter()
            .map(|z| Ok(b.contract_z(&gamma, z) - oracle.cond_density(pop.kind, z)?))
            .collect::<Result<_>>()?;
        Ok(vec![mean(r.iter().map(|v| v * v))])
    })?;
    Ok(est[0])
}

/// Intermediate risk L̃_k(b) = ∫ E[r(b, C, z; η̂ᵏ)² | 𝒟_{I_kᶜ}] dν(z): fresh contexts
/// with the fitted nuisance held fixed.
pub fn intermediate_risk(
    b: &BridgeEstimate,
    nuisance: &dyn Nuisance,
    pop: &Population<'_>,
    sizes: &McSizes,
    seed: u64,
) -> Result<McEstimate> {
    let est = pop.estimate(sizes, seed, stream::INTERMEDIATE, 1, |_, c, zs| {
        let r = residuals(b, nuisance, c, zs)?;
        Ok(vec![mean(r.iter().map(|v| v * v))])
    })?;
    Ok(est[0])
}

/// Empirical risks L̂_k(b) of every fold of `system`: exact averages of the squared
/// residuals over the fold's held-out contexts and reference draws.
pub fn empirical_risk(system: &BridgeSystem, b: &BridgeEstimate) -> Result<Vec<f64>> {
    if system.blocks.iter().any(CriterionBlock::is_empty) {
        return config_err("empirical risk of an empty fold");
    }
    Ok(system.block_losses(&system.block_values_of(b)?))
}

/// Population, penalized, intermediate and empirical risks of one fitted bridge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub lambda: f64,
    pub rkhs_norm_sq: f64,
    pub population: McEstimate,
    /// L_λ = L + λ‖b‖².
    pub penalized: f64,
    pub intermediate: Vec<McEstimate>,
    pub empirical: Vec<f64>,
    /// Mean of the foldwise empirical risks.
    pub empirical_cf: f64,
    pub sizes: McSizes,
}

pub fn risk_report(
    b: &BridgeEstimate,
    fit: &PreparedFit,
    pop: &Population<'_>,
    sizes: &McSizes,
    seed: u64,
) -> Result<RiskReport> {
    let population = population_risk(b, pop, sizes, seed)?;
    let intermediate = fit
        .criterion_folds
        .iter()
        .map(|&k| intermediate_risk(b, &fit.nuisances[k], pop, sizes, derive_seed(seed, &[k as u64])))
        .collect::<Result<Vec<_>>>()?;
    let empirical = empirical_risk(&fit.system, b)?;
    let empirical_cf = empirical.iter().sum::<f64>() / empirical.len() as f64;
    Ok(RiskReport {
        lambda: b.lambda,
        rkhs_norm_sq: b.rkhs_norm_sq,
        population,
        penalized: population.mean + b.lambda * b.rkhs_norm_sq,
        intermediate,
        empirical,
        empirical_cf,
        sizes: *sizes,
    })
}

/// Stage-one error terms of one fold, with the two inequalities that bound them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOneReport {
    pub fold: usize,
    /// Δ_k(b) = ∫ E[(r(η̂ᵏ) − r(η⁰))² | 𝒟_{I_kᶜ}] dν.
    pub drift: McEstimate,
    /// Γ_k(b) = ∫ E[|r(η⁰)| |r(η̂ᵏ) − r(η⁰)| | 𝒟_{I_kᶜ}] dν.
    pub cross: McEstimate,
    /// Δ^μ_k = ‖b‖² E‖μ⁰(C) − μ̂ᵏ(C)‖² (the Gaussian kernel has sup ‖φ(z)‖ = 1).
    pub drift_embedding: McEstimate,
    /// Δ^p_k = ∫ E[(p⁰(z | C) − p̂ᵏ(z | C))²] dν.
    pub drift_density: McEstimate,
    /// L(b), from its own contexts and draws.
    pub population: McEstimate,
    /// √L √Δ_k + 3σ − Γ_k.
    pub cross_slack: f64,
    pub cross_pass: bool,
    /// 2Δ^μ_k + 2Δ^p_k + 3σ − Δ_k.
    pub drift_slack: f64,
    pub drift_pass: bool,
}

fn combined(parts: &[f64]) -> f64 {
    parts.iter().map(|s| s * s).sum::<f64>().sqrt()
}

/// √x with its delta-method standard error (capped where x is within noise of zero).
fn sqrt_estimate(x: &McEstimate) -> (f64, f64) {
    let v = x.mean.max(0.0);
    let root = v.sqrt();
    let se = if root > x.stderr.sqrt() { x.stderr / (2.0 * root) } else { x.stderr.sqrt() };
    (root, se)
}

/// Stage-one terms of fold `fold` with nuisance estimate `nuisance`. An exact nuisance
/// is taken to be the population's own law, so its embedding drift is zero.
pub fn stage1_terms(
    b: &BridgeEstimate,
    nuisance: &dyn Nuisance,
    fold: usize,
    pop: &Population<'_>,
    sizes: &McSizes,
    seed: u64,
) -> Result<StageOneReport> {
    let oracle = pop.oracle();
    let terms = pop.estimate(sizes, seed, stream::DRIFT, 2, |_, c, zs| {
        let r0 = residuals(b, &oracle, c, zs)?;
        let rk = residuals(b, nuisance, c, zs)?;
        let drift = mean(r0.iter().zip(&rk).map(|(d, a)| (a - d) * (a - d)));
        let cross = mean(r0.iter().zip(&rk).map(|(d, a)| d.abs() * (a - d).abs()));
        Ok(vec![drift, cross])
    })?;
    let (drift, cross) = (terms[0], terms[1]);
    let drift_embedding = pop.estimate(sizes, seed, stream::EMBEDDING, 1, |_, c, _| {
        if nuisance.is_exact() {
            return Ok(vec![0.0]);
        }
        let at0 = oracle.at(c)?;
        let atk = nuisance.at(c)?;
        let gap = at0.embedding_norm_sq()? - 2.0 * embedding_inner(nuisance, atk.as_ref(), &oracle, at0.as_ref())?
            + atk.embedding_norm_sq()?;
        Ok(vec![b.rkhs_norm_sq * gap.max(0.0)])
    })?[0];
    let drift_density = pop.estimate(sizes, seed, stream::DENSITY, 1, |_, c, zs| {
        let at0 = oracle.at(c)?;
        let atk = nuisance.at(c)?;
        let d: Vec<f64> = zs.iter().map(|z| Ok(at0.density(z)? - atk.density(z)?)).collect::<Result<_>>()?;
        Ok(vec![mean(d.iter().map(|v| v * v))])
    })?[0];
    let population = population_risk_on(b, pop, sizes, seed, stream::POPULATION)?;

    let (sl, sl_se) = sqrt_estimate(&population);
    let (sd, sd_se) = sqrt_estimate(&drift);
    let cross_sigma = combined(&[cross.stderr, sl * sd_se, sd * sl_se]);
    let cross_slack = sl * sd + 3.0 * cross_sigma - cross.mean;
    let drift_sigma = combined(&[drift.stderr, 2.0 * drift_embedding.stderr, 2.0 * drift_density.stderr]);
    let drift_slack = 2.0 * drift_embedding.mean + 2.0 * drift_density.mean + 3.0 * drift_sigma - drift.mean;
    Ok(StageOneReport {
        fold,
        drift,
        cross,
        drift_embedding,
        drift_density,
        population,
        cross_slack,
        cross_pass: cross_slack >= 0.0,
        drift_slack,
        drift_pass: drift_slack >= 0.0,
    })
}

/// L(b) − L̃_k(b) against ∫ E[r(η⁰)² − r(η̂ᵏ)²] dν, each side from independent draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskIdentityReport {
    pub fold: usize,
    pub population: McEstimate,
    pub intermediate: McEstimate,
    /// Paired estimate of ∫ E[r(η⁰)² − r(η̂ᵏ)²] dν.
    pub paired: McEstimate,
    /// (L − L̃_k) − paired.
    pub difference: f64,
    pub stderr: f64,
    pub pass: bool,
}

pub fn risk_identity_check(
    b: &BridgeEstimate,
    nuisance: &dyn Nuisance,
    fold: usize,
    pop: &Population<'_>,
    sizes: &McSizes,
    seed: u64,
) -> Result<RiskIdentityReport> {
    let oracle = pop.oracle();
    let population = population_risk(b, pop, sizes, seed)?;
    let intermediate = intermediate_risk(b, nuisance, pop, sizes, seed)?;
    let paired = pop.estimate(sizes, seed, stream::PAIRED, 1, |_, c, zs| {
        let r0 = residuals(b, &oracle, c, zs)?;
        let rk = residuals(b, nuisance, c, zs)?;
        Ok(vec![mean(r0.iter().zip(&rk).map(|(d, a)| d * d - a * a))])
    })?[0];
    let difference = population.mean - intermediate.mean - paired.mean;
    let stderr = combined(&[population.stderr, intermediate.stderr, paired.stderr]);
    Ok(RiskIdentityReport {
        fold,
        population,
        intermediate,
        paired,
        difference,
        stderr,
        pass: difference.abs() <= 3.0 * stderr,
    })
}

/// Size of the comparator fit relative to the sample it is compared with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparatorSettings {
    /// Comparator contexts per sample of the fitted bridge.
    pub scale: usize,
    /// Reference draws shared by all comparator contexts.
    pub draws: usize,
    /// W points spanning the projected true embeddings.
    pub representers: usize,
    pub dictionary_cap: usize,
}

impl Default for ComparatorSettings {
    fn default() -> Self {
        Self { scale: 10, draws: 50, representers: 400, dictionary_cap: 2000 }
    }
}

/// Relative ridge of the projection of true embeddings onto the representer span.
const PROJECTION_RIDGE: f64 = 1e-8;

/// Pseudo-comparator for b†_λ: the Stage II fit on `settings.scale · n` fresh contexts
/// with the true nuisances. Each μ⁰(c) is replaced by its projection onto the span of
/// φ at fresh W points, and targets are the exact densities p⁰(z̃ | c).
pub fn pseudo_comparator(
    pop: &Population<'_>,
    n: usize,
    settings: &ComparatorSettings,
    kernel_z: KernelSpec,
    lambda: f64,
    seed: u64,
) -> Result<BridgeEstimate> {
    if settings.scale < 1 || settings.draws < 1 || settings.representers < 2 || settings.dictionary_cap < 1 {
        return config_err("comparator settings must be positive (at least 2 representers)");
    }
    let base = derive_seed(seed, &[tags::COMPARATOR]);
    let cs = pop.contexts(settings.scale * n, derive_seed(base, &[0]))?;
    let rep_eps = observed(&sample_dataset(pop.model, settings.representers, derive_seed(base, &[1])));
    let points = extract_cmr(&rep_eps, pop.stage, pop.kind)?.w;
    let k = gram_sym(&pop.kernel_w, &points);
    let scale = k.entries().diagonal().max();
    let factor = SpdFactor::new(k.entries(), PROJECTION_RIDGE * scale * points.len() as f64)?;
    let draws = draw_reference(&pop.measure, settings.draws, derive_seed(base, &[2]));
    let oracle = pop.oracle();
    let per_context: Vec<(Vec<f64>, Vec<f64>)> = (0..cs.len())
        .into_par_iter()
        .map(|i| {
            let at = oracle.at(cs.row(i))?;
            let beta = factor.solve_vec(&at.kernel_means(&points)?);
            let targets = draws.iter().map(|z| at.density(z)).collect::<Result<Vec<_>>>()?;
            Ok((beta, targets))
        })
        .collect::<Result<_>>()?;
    let mut targets = DMatrix::zeros(cs.len(), settings.draws);
    let mut contexts = Vec::with_capacity(cs.len());
    for (i, (beta, t)) in per_context.into_iter().enumerate() {
        for (d, v) in t.into_iter().enumerate() {
            targets[(i, d)] = v;
        }
        contexts.push(ContextEmbedding { fold: 0, source_index: i, support: 0, weights: beta });
    }
    let basis =
        EmbeddingBasis { kernel_w: pop.kernel_w, supports: vec![(0..points.len()).collect()], points, contexts };
    let block = CriterionBlock {
        fold: 0,
        contexts: (0..cs.len()).collect(),
        source_indices: (0..cs.len()).collect(),
        draws,
        targets,
    };
    let blocks = vec![block];
    let (atoms, complete) = choose_atoms(&blocks, settings.dictionary_cap, derive_seed(base, &[3]));
    let system = BridgeSystem::with_blocks(basis, atoms, kernel_z, blocks, complete)?;
    fit_bridge_crossfit(&system, lambda)
}

/// The element of the span of `system`'s dictionary closest to `b` in the
/// tensor-product RKHS, expressed on that dictionary with the fitted bridge's λ.
pub fn project_onto_dictionary(
    system: &BridgeSystem,
    b: &BridgeEstimate,
    like: &BridgeEstimate,
) -> Result<BridgeEstimate> {
    if !Arc::ptr_eq(&like.basis, &system.basis) {
        return config_err("the template bridge must be fitted on the given system");
    }
    let v = system.atom_values(b)?;
    let factor = SpdFactor::new(system.gram.entries(), 0.0)?;
    like.with_alpha(factor.solve_vec(&v))
}

/// Minimality of the fitted bridge against a comparator on the same objective, and the
/// two-point bound L_λ(b̂) − L_λ(b†) ≤ |L_λ(b̂) − L̂(b̂)| + |L̂(b†) − L_λ(b†)|, where L̂
/// is the penalized empirical objective and L_λ its population counterpart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleGapReport {
    pub lambda: f64,
    pub objective_fit: f64,
    pub objective_comparator: f64,
    pub minimal: bool,
    pub penalized_fit: McEstimate,
    pub penalized_comparator: McEstimate,
    /// L_λ(b̂) − L_λ(b†).
    pub left: f64,
    pub right: f64,
    pub stderr: f64,
    pub pass: bool,
    /// True when the comparator was projected onto a capped dictionary.
    pub projected: bool,
}

/// Relative tolerance of the exact minimality comparison (floating-point round-off).
const MINIMALITY_RTOL: f64 = 1e-10;

pub fn oracle_gap_check(
    fit: &BridgeEstimate,
    comparator: &BridgeEstimate,
    system: &BridgeSystem,
    pop: &Population<'_>,
    sizes: &McSizes,
    seed: u64,
) -> Result<OracleGapReport> {
    let lambda = fit.lambda;
    let projected = !system.complete;
    let comp = if projected { project_onto_dictionary(system, comparator, fit)? } else { comparator.clone() };
    let objective_fit = system.objective_of(fit, lambda)?;
    let objective_comparator = system.objective_of(&comp, lambda)?;
    let minimal = objective_fit <= objective_comparator * (1.0 + MINIMALITY_RTOL) + f64::MIN_POSITIVE;

    let oracle = pop.oracle();
    let est = pop.estimate(sizes, seed, stream::GAP, 3, |_, c, zs| {
        let r_fit = residuals(fit, &oracle, c, zs)?;
        let r_comp = residuals(&comp, &oracle, c, zs)?;
        let a = mean(r_fit.iter().map(|v| v * v));
        let b = mean(r_comp.iter().map(|v| v * v));
        Ok(vec![a, b, a - b])
    })?;
    let pen = |e: McEstimate, norm: f64| McEstimate { mean: e.mean + lambda * norm, ..e };
    let penalized_fit = pen(est[0], fit.rkhs_norm_sq);
    let penalized_comparator = pen(est[1], comp.rkhs_norm_sq);
    let left = est[2].mean + lambda * (fit.rkhs_norm_sq - comp.rkhs_norm_sq);
    let right = (penalized_fit.mean - objective_fit).abs() + (objective_comparator - penalized_comparator.mean).abs();
    let stderr = combined(&[est[2].stderr, est[0].stderr, est[1].stderr]);
    Ok(OracleGapReport {
        lambda,
        objective_fit,
        objective_comparator,
        minimal,
        penalized_fit,
        penalized_comparator,
        left,
        right,
        stderr,
        pass: left <= right + 3.0 * stderr,
        projected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::{bridge_cond_exp, prepare_crossfit, Stage2Settings};
    use crate::nuisance::{density_eval, NuisancePair, NuisanceSettings};
    use crate::synthetic::{FiniteLatentPomdp, FiniteLatentSpec};

    struct Setup {
        model: FiniteLatentPomdp,
        fit: PreparedFit,
        bridge: BridgeEstimate,
    }

    fn setup(n: usize, seed: u64) -> Setup {
        let model = FiniteLatentPomdp::new(FiniteLatentSpec::three_state(2)).unwrap();
        let eps = observed(&sample_dataset(&model, n, seed));
        let data = extract_cmr(&eps, 1, CmrKind::Transition).unwrap();
        let s2 = Stage2Settings { m_per_fold: 10, dictionary_cap: 2000, box_trim: 0.0 };
        let fit = prepare_crossfit(&data, 4, &NuisanceSettings::default(), &s2, seed).unwrap();
        let bridge = fit_bridge_crossfit(&fit.system, 1e-3).unwrap();
        Setup { model, fit, bridge }
    }

    fn population<'a>(s: &'a Setup) -> Population<'a> {
        let mut measure = s.fit.system.measures[0].clone();
        for m in &s.fit.system.measures {
            measure = measure.hull(m).unwrap();
        }
        Population {
            model: &s.model,
            stage: 1,
            kind: CmrKind::Transition,
            measure,
            kernel_w: s.fit.system.basis.kernel_w,
        }
    }

    fn zero(b: &BridgeEstimate) -> BridgeEstimate {
        b.with_alpha(vec![0.0; b.len()]).unwrap()
    }

    const SMALL: McSizes = McSizes { contexts: 300, draws: 16 };

    #[test]
    fn zero_bridge_risk_is_the_mean_squared_density() {
        let s = setup(80, 1);
        let pop = population(&s);
        let got = population_risk(&zero(&s.bridge), &pop, &SMALL, 5).unwrap();
        // direct: E[p(Z̃ | C)²] with Z̃ uniform on the box
        let cs = pop.contexts(3000, 99).unwrap();
        let zs = draw_reference(&pop.measure, cs.len(), 98);
        let vals: Vec<f64> = (0..cs.len())
            .map(|i| {
                ContextOracle::new(&s.model, cs.row(i))
                    .unwrap()
                    .cond_density(CmrKind::Transition, zs.row(i))
                    .unwrap()
                    .powi(2)
            })
            .collect();
        let direct = McEstimate::from_samples(&vals);
        assert!((got.mean - direct.mean).abs() < 3.0 * combined(&[got.stderr, direct.stderr]), "{got:?} vs {direct:?}");
    }

    #[test]
    fn sampled_conditional_mean_agrees_with_the_closed_form() {
        let s = setup(80, 2);
        let pop = population(&s);
        let sizes = McSizes { contexts: 40, draws: 8 };
        let exact = population_risk(&s.bridge, &pop, &sizes, 3).unwrap();
        let sampled = population_risk_sampled(&s.bridge, &pop, &sizes, 20_000, 3).unwrap();
        // same contexts and draws: only the inner average differs
        assert!((exact.mean - sampled.mean).abs() < 0.02 * exact.mean + 1e-6, "{exact:?} vs {sampled:?}");
    }

    #[test]
    fn true_nuisances_make_intermediate_and_population_risk_agree() {
        let s = setup(80, 3);
        let pop = population(&s);
        let l = population_risk(&s.bridge, &pop, &SMALL, 7).unwrap();
        let lt = intermediate_risk(&s.bridge, &pop.oracle(), &pop, &SMALL, 7).unwrap();
        assert!((l.mean - lt.mean).abs() < 3.0 * combined(&[l.stderr, lt.stderr]));
    }

    struct NoDensity<'a>(&'a NuisancePair);

    struct NoDensityAt<'a>(Box<dyn NuisanceAt + 'a>);

    impl NuisanceAt for NoDensityAt<'_> {
        fn kernel_means(&self, points: &PointSet) -> Result<Vec<f64>> {
            self.0.kernel_means(points)
        }
        fn embedding_norm_sq(&self) -> Result<f64> {
            self.0.embedding_norm_sq()
        }
        fn representer_weights(&self) -> Option<&[f64]> {
            self.0.representer_weights()
        }
        fn density(&self, _z: &[f64]) -> Result<f64> {
            Ok(0.0)
        }
    }

    impl Nuisance for NoDensity<'_> {
        fn kernel_w(&self) -> &KernelSpec {
            self.0.kernel_w()
        }
        fn representers(&self) -> Option<&PointSet> {
            self.0.representers()
        }
        fn at(&self, c: &[f64]) -> Result<Box<dyn NuisanceAt + '_>> {
            Ok(Box::new(NoDensityAt(self.0.at(c)?)))
        }
    }

    #[test]
    fn intermediate_risk_is_quadratic_in_the_bridge() {
        let s = setup(80, 4);
        let pop = population(&s);
        let stub = NoDensity(&s.fit.nuisances[0]);
        let doubled = s.bridge.with_alpha(s.bridge.alpha.iter().map(|a| 2.0 * a).collect()).unwrap();
        let a = intermediate_risk(&s.bridge, &stub, &pop, &SMALL, 1).unwrap();
        let b = intermediate_risk(&doubled, &stub, &pop, &SMALL, 1).unwrap();
        assert!((b.mean - 4.0 * a.mean).abs() < 1e-10 * b.mean);
    }

    #[test]
    fn empirical_risk_matches_termwise_residuals() {
        let s = setup(40, 5);
        let risks = empirical_risk(&s.fit.system, &s.bridge).unwrap();
        for (k, block) in s.fit.system.blocks.iter().enumerate() {
            let pair = &s.fit.nuisances[block.fold];
            let mut acc = 0.0;
            for (pos, &src) in block.source_indices.iter().enumerate() {
                let c = s.fit.system.basis.contexts[block.contexts[pos]].source_index;
                assert_eq!(c, src);
                let eps = observed(&sample_dataset(&s.model, 40, 5));
                let data = extract_cmr(&eps, 1, CmrKind::Transition).unwrap();
                let ci = data.c.row(src);
                for z in block.draws.iter() {
                    let r = bridge_cond_exp(&s.bridge, &pair.cme, ci, z).unwrap()
                        - density_eval(&pair.density, z, ci).unwrap();
                    acc += r * r;
                }
            }
            let want = acc / block.len() as f64;
            assert!((risks[k] - want).abs() < 1e-9 * (1.0 + want), "fold {k}: {} vs {want}", risks[k]);
        }
        let zero_risk = empirical_risk(&s.fit.system, &zero(&s.bridge)).unwrap();
        for (k, block) in s.fit.system.blocks.iter().enumerate() {
            assert!((zero_risk[k] - block.targets.norm_squared() / block.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn penalized_risk_adds_the_norm_exactly() {
        let s = setup(80, 6);
        let pop = population(&s);
        let r = risk_report(&s.bridge, &s.fit, &pop, &McSizes { contexts: 20, draws: 4 }, 2).unwrap();
        assert!((r.penalized - r.population.mean - r.lambda * r.rkhs_norm_sq).abs() < 1e-10);
        assert_eq!(r.intermediate.len(), 4);
        assert_eq!(r.empirical.len(), 4);
        assert!(r.population.mean >= -3.0 * r.population.stderr);
    }

    #[test]
    fn stage_one_terms_respect_their_bounds() {
        let s = setup(120, 7);
        let pop = population(&s);
        let rep = stage1_terms(&s.bridge, &s.fit.nuisances[1], 1, &pop, &SMALL, 3).unwrap();
        assert_eq!(rep.fold, 1);
        for e in [rep.drift, rep.cross, rep.drift_embedding, rep.drift_density] {
            assert!(e.mean >= 0.0);
        }
        assert!(rep.cross_pass, "{rep:?}");
        assert!(rep.drift_pass, "{rep:?}");
    }

    #[test]
    fn exact_nuisances_have_no_stage_one_error() {
        let s = setup(80, 13);
        let pop = population(&s);
        let oracle = pop.oracle();
        let rep = stage1_terms(&s.bridge, &oracle, 0, &pop, &SMALL, 3).unwrap();
        for e in [rep.drift, rep.cross, rep.drift_embedding, rep.drift_density] {
            assert_eq!(e.mean, 0.0);
        }
        assert!(rep.cross_pass && rep.drift_pass);
        let l2 = risk_identity_check(&s.bridge, &oracle, 0, &pop, &SMALL, 3).unwrap();
        assert_eq!(l2.paired.mean, 0.0);
        assert!(l2.pass, "{l2:?}");
    }

    #[test]
    fn risk_identity_reduces_to_density_terms_for_the_zero_bridge() {
        let s = setup(80, 8);
        let pop = population(&s);
        let z = zero(&s.bridge);
        let rep = risk_identity_check(&z, &s.fit.nuisances[0], 0, &pop, &SMALL, 4).unwrap();
        // paired side is ∫ E[p⁰² − p̂²] dν, estimated here independently
        let oracle = pop.oracle();
        let pair = &s.fit.nuisances[0];
        let direct = pop
            .estimate(&SMALL, 77, 0, 1, |_, c, zs| {
                let a0 = oracle.at(c)?;
                let ak = pair.at(c)?;
                let v: Vec<f64> =
                    zs.iter().map(|z| Ok(a0.density(z)?.powi(2) - ak.density(z)?.powi(2))).collect::<Result<_>>()?;
                Ok(vec![mean(v.into_iter())])
            })
            .unwrap()[0];
        assert!((rep.paired.mean - direct.mean).abs() < 3.0 * combined(&[rep.paired.stderr, direct.stderr]));
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn gap_check_against_itself_is_trivial() {
        let s = setup(80, 9);
        let pop = population(&s);
        let rep = oracle_gap_check(&s.bridge, &s.bridge, &s.fit.system, &pop, &McSizes { contexts: 30, draws: 4 }, 1)
            .unwrap();
        assert!(rep.minimal);
        assert_eq!(rep.left, 0.0);
        assert!(rep.pass);
    }

    #[test]
    fn comparator_fit_beats_the_zero_bridge_and_loses_on_the_objective() {
        let s = setup(80, 10);
        let pop = population(&s);
        let settings = ComparatorSettings { scale: 5, draws: 20, representers: 200, dictionary_cap: 600 };
        let comp = pseudo_comparator(&pop, 80, &settings, s.fit.system.kernel_z, 1e-3, 3).unwrap();
        let l_comp = population_risk(&comp, &pop, &SMALL, 2).unwrap();
        let l_zero = population_risk(&zero(&s.bridge), &pop, &SMALL, 2).unwrap();
        assert!(l_comp.mean < 0.5 * l_zero.mean, "{l_comp:?} vs {l_zero:?}");
        let rep = oracle_gap_check(&s.bridge, &comp, &s.fit.system, &pop, &SMALL, 4).unwrap();
        assert!(!rep.projected);
        assert!(rep.minimal, "{} > {}", rep.objective_fit, rep.objective_comparator);
    }

    #[test]
    fn projection_keeps_members_of_the_span() {
        let s = setup(40, 11);
        let p = project_onto_dictionary(&s.fit.system, &s.bridge, &s.bridge).unwrap();
        let a = s.fit.system.objective_of(&s.bridge, 1e-3).unwrap();
        let b = s.fit.system.objective_of(&p, 1e-3).unwrap();
        assert!((a - b).abs() < 1e-6 * a, "{a} vs {b}");
    }

    #[test]
    fn tiny_monte_carlo_sizes_are_rejected() {
        let s = setup(40, 12);
        let pop = population(&s);
        assert!(population_risk(&s.bridge, &pop, &McSizes { contexts: 1, draws: 4 }, 1).unwrap_err().is_config());
    }
}
