use nalgebra::DMatrix;

use super::{CmrKind, LatentModel};
use crate::bridge::Bridge;
use crate::error::{config_err, Error, Result};
use crate::stats::gauss_iso;

/// Closed-form bridge of a model with finitely many latent states:
/// b(u, y, z) = Σ_j β_j(y) p(z | X = j, u), where β_j(y) = Σ_l A_jl N(y; e_l, σ² I)
/// and A inverts the cross-density matrix ∫ N(y; e_i) N(y; e_l) dy = N(e_i; e_l, 2σ² I),
/// so that E[β_j(Y) | X = i] = δ_ij. The emission law does not change over time, so the
/// same function solves the bridge equation of its kind at every stage.
#[derive(Clone, Debug)]
pub struct ExactBridge<M> {
    model: M,
    kind: CmrKind,
    inverse: DMatrix<f64>,
}

impl<M: LatentModel + Clone> ExactBridge<M> {
    pub fn new(model: &M, kind: CmrKind) -> Result<Self> {
        if !model.has_finite_latent() {
            return config_err("exact bridges need a model with finitely many latent states");
        }
        let support = model.filter_support();
        if kind == CmrKind::Reward && model.reward_density(&support[0], 0, 0.0).is_none() {
            return config_err("the model's rewards have no density, so no reward bridge exists");
        }
        let means = model.filter_emission_means();
        let pair_sd = model.emission_sd() * std::f64::consts::SQRT_2;
        let j = support.len();
        let cross = DMatrix::from_fn(j, j, |a, b| gauss_iso(means.row(a), means.row(b), pair_sd));
        let inverse = cross
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("emission means do not give an invertible cross-density matrix".into()))?;
        Ok(Self { model: model.clone(), kind, inverse })
    }

    pub fn kind(&self) -> CmrKind {
        self.kind
    }

    pub fn num_states(&self) -> usize {
        self.inverse.nrows()
    }

    /// Weights β_j(y) with E[β_j(Y) | X = i] = δ_ij.
    pub fn state_indicator_weights(&self, y: &[f64]) -> Vec<f64> {
        let means = self.model.filter_emission_means();
        let sd = self.model.emission_sd();
        let j = self.num_states();
        let dens: Vec<f64> = (0..j).map(|l| gauss_iso(y, means.row(l), sd)).collect();
        (0..j).map(|a| (0..j).map(|l| self.inverse[(a, l)] * dens[l]).sum()).collect()
    }

    /// Density of Z given latent state `state` and action `u`.
    pub fn latent_z_density(&self, state: usize, u: u8, z: &[f64]) -> f64 {
        let d = self.model.obs_dim();
        let sd = self.model.emission_sd();
        let x = &self.model.filter_support()[state];
        let e = self.model.filter_emission_means().row(state);
        match self.kind {
            CmrKind::Transition => gauss_iso(&z[d..], e, sd) * self.model.next_obs_density(x, u, &z[..d]),
            CmrKind::Reward => gauss_iso(&z[1..], e, sd) * self.model.reward_density(x, u, z[0]).unwrap_or(0.0),
        }
    }
}

impl<M: LatentModel + Clone> Bridge for ExactBridge<M> {
    fn w_dim(&self) -> usize {
        1 + self.model.obs_dim()
    }

    fn z_dim(&self) -> usize {
        match self.kind {
            CmrKind::Transition => 2 * self.model.obs_dim(),
            CmrKind::Reward => 1 + self.model.obs_dim(),
        }
    }

    fn eval(&self, w: &[f64], z: &[f64]) -> f64 {
        let u = u8::from(w[0] >= 0.5);
        self.state_indicator_weights(&w[1..]).iter().enumerate().map(|(j, b)| b * self.latent_z_density(j, u, z)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{FiniteLatentPomdp, FiniteLatentSpec, GaussianPomdp, PomdpSpec};

    #[test]
    fn indicator_weights_are_unbiased_for_state_indicators() {
        let m = FiniteLatentPomdp::new(FiniteLatentSpec::three_state(2)).unwrap();
        let b = m.exact_bridge(CmrKind::Transition);
        // E[β_j(Y) | X = i] by a fine midpoint rule over the emission density
        for i in 0..3 {
            let e = m.spec().emission_means[i][0];
            let h = 0.001;
            let mut acc = [0.0; 3];
            for k in 0..12_000 {
                let y = e - 6.0 + h * (k as f64 + 0.5);
                let dens = gauss_iso(&[y], &[e], 0.6);
                let w = b.state_indicator_weights(&[y]);
                for j in 0..3 {
                    acc[j] += w[j] * dens * h;
                }
            }
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((acc[j] - target).abs() < 1e-6, "state {i} weight {j}: {}", acc[j]);
            }
        }
    }

    #[test]
    fn continuous_latent_models_have_no_exact_bridge() {
        let m = GaussianPomdp::new(PomdpSpec { latent_levels: 0, ..PomdpSpec::default() }).unwrap();
        assert!(ExactBridge::new(&m, CmrKind::Transition).unwrap_err().is_config());
        let m = GaussianPomdp::new(PomdpSpec::default()).unwrap();
        assert!(ExactBridge::new(&m, CmrKind::Transition).is_ok());
        // deterministic rewards have no density
        assert!(ExactBridge::new(&m, CmrKind::Reward).unwrap_err().is_config());
    }
}
