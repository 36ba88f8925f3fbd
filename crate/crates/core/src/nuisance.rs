//! Stage I: fold management, conditional mean embeddings of W given C and
//! Gaussian conditional densities of Z given C, all fit on auxiliary samples.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, range_err, Error, Result};
use crate::kernel::{gram, gram_sym, kernel_vector, KernelSpec, SpdFactor};
use crate::points::PointSet;
use crate::rng::rng_from_seed;
use crate::stats::normal_pdf;
use crate::synthetic::{CmrDataset, CmrKind, ContextOracle, LatentModel};

/// Equal-size disjoint folds of {0, …, N−1}.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPartition {
    n_total: usize,
    folds: Vec<Vec<usize>>,
}

impl FoldPartition {
    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn fold(&self, k: usize) -> &[usize] {
        &self.folds[k]
    }

    /// Sorted indices outside fold `k`.
    pub fn complement(&self, k: usize) -> Vec<usize> {
        let mut inside = vec![false; self.n_total];
        for &i in &self.folds[k] {
            inside[i] = true;
        }
        (0..self.n_total).filter(|&i| !inside[i]).collect()
    }
}

/// Uniformly random partition of N indices into K equal folds (each fold sorted).
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPartition> {
    if k < 2 {
        return config_err(format!("cross-fitting needs at least 2 folds, got {k}"));
    }
    if n % k != 0 || n == 0 {
        return Err(Error::Divisibility { n, k });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let size = n / k;
    let folds = idx
        .chunks(size)
        .map(|c| {
            let mut f = c.to_vec();
            f.sort_unstable();
            f
        })
        .collect();
    Ok(FoldPartition { n_total: n, folds })
}

/// λ₁ = scale · n^(−exponent) for an auxiliary sample of size n.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgeRule {
    pub scale: f64,
    pub exponent: f64,
}

impl RidgeRule {
    pub fn at(&self, n: usize) -> f64 {
        self.scale * (n as f64).powf(-self.exponent)
    }
}

/// Regularized operator regression of φ(W) on ψ(C):
/// ⟨μ̂(c), φ(w)⟩ = k_C(c)ᵀ (K_C + n λ₁ I)⁻¹ k_W(train_w, w).
#[derive(Clone, Debug)]
pub struct CmeModel {
    train_c: PointSet,
    train_w: PointSet,
    kernel_c: KernelSpec,
    kernel_w: KernelSpec,
    lambda1: f64,
    factor: SpdFactor,
    source_indices: Vec<usize>,
}

impl CmeModel {
    pub fn fit(
        train_c: PointSet,
        train_w: PointSet,
        kernel_c: KernelSpec,
        kernel_w: KernelSpec,
        lambda1: f64,
    ) -> Result<Self> {
        let n = train_c.len();
        let indices = (0..n).collect();
        let k_c = gram_sym(&kernel_c, &train_c);
        Self::from_gram(train_c, train_w, kernel_c, kernel_w, lambda1, k_c.entries(), indices)
    }

    fn from_gram(
        train_c: PointSet,
        train_w: PointSet,
        kernel_c: KernelSpec,
        kernel_w: KernelSpec,
        lambda1: f64,
        k_c: &DMatrix<f64>,
        source_indices: Vec<usize>,
    ) -> Result<Self> {
        let n = train_c.len();
        if n == 0 {
            return config_err("conditional mean embedding needs a nonempty training sample");
        }
        if train_w.len() != n {
            return range_err(format!("{} contexts but {} W points", n, train_w.len()));
        }
        if !(lambda1 > 0.0) {
            return config_err(format!("stage-one ridge must be positive, got {lambda1}"));
        }
        let factor = SpdFactor::new(k_c, n as f64 * lambda1)?;
        Ok(Self { train_c, train_w, kernel_c, kernel_w, lambda1, factor, source_indices })
    }

    pub fn kernel_c(&self) -> &KernelSpec {
        &self.kernel_c
    }

    pub fn kernel_w(&self) -> &KernelSpec {
        &self.kernel_w
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn train_w(&self) -> &PointSet {
        &self.train_w
    }

    pub fn train_c(&self) -> &PointSet {
        &self.train_c
    }

    /// Dataset indices of the training sample.
    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    fn check_c(&self, c: &[f64]) -> Result<()> {
        if c.len() != self.train_c.dim() {
            return range_err(format!(
                "context has dimension {} but the model expects {}",
                c.len(),
                self.train_c.dim()
            ));
        }
        Ok(())
    }

    /// Representer weights β(c) = (K_C + nλ₁I)⁻¹ k_C(c), so μ̂(c) = Σ_i β_i φ(w_i).
    pub fn weights(&self, c: &[f64]) -> Result<Vec<f64>> {
        self.check_c(c)?;
        Ok(self.factor.solve_vec(&kernel_vector(&self.kernel_c, &self.train_c, c)))
    }

    /// Weights for many contexts at once (one column per context).
    pub fn weights_batch(&self, cs: &PointSet) -> Result<DMatrix<f64>> {
        let k = gram(&self.kernel_c, &self.train_c, cs)?;
        Ok(self.factor.solve_mat(k.entries()))
    }

    /// ⟨μ̂(c), φ(w)⟩.
    pub fn apply(&self, c: &[f64], w: &[f64]) -> Result<f64> {
        if w.len() != self.train_w.dim() {
            return range_err(format!("w has dimension {} but the model expects {}", w.len(), self.train_w.dim()));
        }
        let beta = self.weights(c)?;
        Ok(beta.iter().zip(self.train_w.iter()).map(|(b, wi)| b * self.kernel_w.eval(wi, w)).sum())
    }
}

/// ⟨μ̂ᵃ(c_a), μ̂ᵇ(c_b)⟩ in H_W.
pub fn cme_inner(a: &CmeModel, c_a: &[f64], b: &CmeModel, c_b: &[f64]) -> Result<f64> {
    if a.kernel_w != b.kernel_w {
        return config_err("embeddings use different W kernels");
    }
    let wa = a.weights(c_a)?;
    let wb = b.weights(c_b)?;
    let k = gram(&a.kernel_w, &a.train_w, &b.train_w)?;
    let kb = k.entries() * DVector::from_vec(wb);
    Ok(wa.iter().zip(kb.iter()).map(|(x, y)| x * y).sum())
}

/// Homoscedastic Gaussian model of Z given C with a kernel-ridge mean.
#[derive(Clone, Debug)]
pub struct CondDensityModel {
    train_c: PointSet,
    kernel_c: KernelSpec,
    /// Dual coefficients of the centered mean, one column per z coordinate.
    dual: DMatrix<f64>,
    offset: Vec<f64>,
    variance: Vec<f64>,
    variance_floor: f64,
    ridge: f64,
    source_indices: Vec<usize>,
}

impl CondDensityModel {
    pub fn fit(
        train_c: PointSet,
        train_z: PointSet,
        kernel_c: KernelSpec,
        ridge: f64,
        variance_floor: f64,
    ) -> Result<Self> {
        let n = train_c.len();
        let k_c = gram_sym(&kernel_c, &train_c);
        let factor = if n >= 2 && ridge > 0.0 { Some(SpdFactor::new(k_c.entries(), n as f64 * ridge)?) } else { None };
        Self::from_parts(
            train_c,
            &train_z,
            kernel_c,
            ridge,
            variance_floor,
            k_c.entries(),
            factor.as_ref(),
            (0..n).collect(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        train_c: PointSet,
        train_z: &PointSet,
        kernel_c: KernelSpec,
        ridge: f64,
        variance_floor: f64,
        k_c: &DMatrix<f64>,
        factor: Option<&SpdFactor>,
        source_indices: Vec<usize>,
    ) -> Result<Self> {
        let n = train_c.len();
        if n < 2 {
            return config_err(format!("conditional density needs at least 2 training samples, got {n}"));
        }
        if train_z.len() != n {
            return range_err(format!("{} contexts but {} z points", n, train_z.len()));
        }
        if !(ridge > 0.0) || !(variance_floor > 0.0) {
            return config_err("density ridge and variance floor must be positive");
        }
        let factor = factor.ok_or_else(|| Error::Config("missing factorization".into()))?;
        let dz = train_z.dim();
        let mut offset = vec![0.0; dz];
        for z in train_z.iter() {
            for (o, v) in offset.iter_mut().zip(z) {
                *o += v / n as f64;
            }
        }
        let centered = DMatrix::from_fn(n, dz, |i, d| train_z.row(i)[d] - offset[d]);
        let dual = factor.solve_mat(&centered);
        let fitted = k_c * &dual;
        let variance = (0..dz)
            .map(|d| {
                let ss: f64 = (0..n).map(|i| (centered[(i, d)] - fitted[(i, d)]).powi(2)).sum();
                (ss / n as f64).max(variance_floor)
            })
            .collect();
        Ok(Self { train_c, kernel_c, dual, offset, variance, variance_floor, ridge, source_indices })
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn variance_floor(&self) -> f64 {
        self.variance_floor
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn z_dim(&self) -> usize {
        self.offset.len()
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    pub fn mean(&self, c: &[f64]) -> Result<Vec<f64>> {
        if c.len() != self.train_c.dim() {
            return range_err(format!(
                "context has dimension {} but the model expects {}",
                c.len(),
                self.train_c.dim()
            ));
        }
        let k = kernel_vector(&self.kernel_c, &self.train_c, c);
        Ok((0..self.z_dim())
            .map(|d| self.offset[d] + self.dual.column(d).iter().zip(&k).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }

    /// Density at `z` given a precomputed conditional mean.
    pub fn density_at_mean(&self, mean: &[f64], z: &[f64]) -> f64 {
        z.iter().zip(mean).zip(&self.variance).map(|((zv, m), v)| normal_pdf(*zv, *m, v.sqrt())).product()
    }
}

/// p̂(z | c).
pub fn density_eval(model: &CondDensityModel, z: &[f64], c: &[f64]) -> Result<f64> {
    if z.len() != model.z_dim() {
        return range_err(format!("z has dimension {} but the model expects {}", z.len(), model.z_dim()));
    }
    Ok(model.density_at_mean(&model.mean(c)?, z))
}

/// Stage I settings shared by all folds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceSettings {
    pub lambda1: RidgeRule,
    /// Ridge of the density mean regression; `None` reuses λ₁.
    pub density_ridge: Option<f64>,
    pub variance_floor: f64,
}

impl Default for NuisanceSettings {
    fn default() -> Self {
        Self { lambda1: RidgeRule { scale: 0.1, exponent: 0.5 }, density_ridge: None, variance_floor: 1e-4 }
    }
}

/// Conditional mean embedding and conditional density fit on one auxiliary sample.
#[derive(Clone, Debug)]
pub struct NuisancePair {
    pub fold: usize,
    pub cme: CmeModel,
    pub density: CondDensityModel,
}

impl NuisancePair {
    /// Fits both models on `data[train]`; the C kernel bandwidth comes from the
    /// training contexts only.
    pub fn fit(
        data: &CmrDataset,
        train: &[usize],
        kernel_w: KernelSpec,
        settings: &NuisanceSettings,
        fold: usize,
    ) -> Result<Self> {
        let n = train.len();
        if n < 2 {
            return config_err(format!("auxiliary sample of size {n} is too small"));
        }
        let train_c = data.c.select(train);
        let train_w = data.w.select(train);
        let train_z = data.z.select(train);
        let kernel_c = KernelSpec::gaussian_median(&train_c)?;
        let k_c = gram_sym(&kernel_c, &train_c);
        let lambda1 = settings.lambda1.at(n);
        let cme =
            CmeModel::from_gram(train_c.clone(), train_w, kernel_c, kernel_w, lambda1, k_c.entries(), train.to_vec())?;
        let ridge = settings.density_ridge.unwrap_or(lambda1);
        let own;
        let factor = if ridge == lambda1 {
            &cme.factor
        } else {
            own = SpdFactor::new(k_c.entries(), n as f64 * ridge)?;
            &own
        };
        let density = CondDensityModel::from_parts(
            train_c,
            &train_z,
            kernel_c,
            ridge,
            settings.variance_floor,
            k_c.entries(),
            Some(factor),
            train.to_vec(),
        )?;
        Ok(Self { fold, cme, density })
    }

    /// Dataset indices the pair was trained on.
    pub fn train_indices(&self) -> &[usize] {
        self.cme.source_indices()
    }
}

/// Fits the CME on `data[indices]`.
pub fn fit_cme(
    data: &CmrDataset,
    indices: &[usize],
    kernel_c: KernelSpec,
    kernel_w: KernelSpec,
    lambda1: f64,
) -> Result<CmeModel> {
    let train_c = data.c.select(indices);
    let k_c = gram_sym(&kernel_c, &train_c);
    CmeModel::from_gram(train_c, data.w.select(indices), kernel_c, kernel_w, lambda1, k_c.entries(), indices.to_vec())
}

/// Fits the Gaussian conditional density on `data[indices]`.
pub fn fit_cond_density(
    data: &CmrDataset,
    indices: &[usize],
    kernel_c: KernelSpec,
    ridge: f64,
    variance_floor: f64,
) -> Result<CondDensityModel> {
    let n = indices.len();
    if n < 2 {
        return config_err(format!("conditional density needs at least 2 training samples, got {n}"));
    }
    let train_c = data.c.select(indices);
    let k_c = gram_sym(&kernel_c, &train_c);
    let factor = SpdFactor::new(k_c.entries(), n as f64 * ridge)?;
    CondDensityModel::from_parts(
        train_c,
        &data.z.select(indices),
        kernel_c,
        ridge,
        variance_floor,
        k_c.entries(),
        Some(&factor),
        indices.to_vec(),
    )
}

/// A pair (μ_{W|C}, p(·|C)) that can be queried context by context: either fitted
/// models or the simulator's exact conditional laws.
pub trait Nuisance: Sync {
    fn kernel_w(&self) -> &KernelSpec;
    /// Fixed representer points when every embedding is a weighted sum of φ at them.
    fn representers(&self) -> Option<&PointSet>;
    fn at(&self, c: &[f64]) -> Result<Box<dyn NuisanceAt + '_>>;
    /// True for the simulator's exact laws.
    fn is_exact(&self) -> bool {
        false
    }
}

/// A nuisance evaluated at one context.
pub trait NuisanceAt {
    /// ⟨μ(c), φ(p)⟩ for every point p.
    fn kernel_means(&self, points: &PointSet) -> Result<Vec<f64>>;
    /// ‖μ(c)‖².
    fn embedding_norm_sq(&self) -> Result<f64>;
    /// Weights over [`Nuisance::representers`], if the embedding has that form.
    fn representer_weights(&self) -> Option<&[f64]>;
    fn density(&self, z: &[f64]) -> Result<f64>;
}

struct FittedAt<'a> {
    pair: &'a NuisancePair,
    beta: Vec<f64>,
    mean: Vec<f64>,
}

impl NuisanceAt for FittedAt<'_> {
    fn kernel_means(&self, points: &PointSet) -> Result<Vec<f64>> {
        let cme = &self.pair.cme;
        let k = gram(&cme.kernel_w, points, &cme.train_w)?;
        Ok((k.entries() * DVector::from_column_slice(&self.beta)).as_slice().to_vec())
    }

    fn embedding_norm_sq(&self) -> Result<f64> {
        let h = self.kernel_means(&self.pair.cme.train_w)?;
        Ok(h.iter().zip(&self.beta).map(|(a, b)| a * b).sum())
    }

    fn representer_weights(&self) -> Option<&[f64]> {
        Some(&self.beta)
    }

    fn density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.pair.density.z_dim() {
            return range_err(format!(
                "z has dimension {} but the model expects {}",
                z.len(),
                self.pair.density.z_dim()
            ));
        }
        Ok(self.pair.density.density_at_mean(&self.mean, z))
    }
}

impl Nuisance for NuisancePair {
    fn kernel_w(&self) -> &KernelSpec {
        &self.cme.kernel_w
    }

    fn representers(&self) -> Option<&PointSet> {
        Some(&self.cme.train_w)
    }

    fn at(&self, c: &[f64]) -> Result<Box<dyn NuisanceAt + '_>> {
        Ok(Box::new(FittedAt { pair: self, beta: self.cme.weights(c)?, mean: self.density.mean(c)? }))
    }
}

/// The true pair η⁰ of a simulator for one bridge equation.
pub struct OracleNuisance<'a> {
    pub model: &'a dyn LatentModel,
    pub kind: CmrKind,
    pub kernel_w: KernelSpec,
}

struct OracleAt<'a> {
    oracle: ContextOracle<'a>,
    kind: CmrKind,
    kernel_w: KernelSpec,
}

impl NuisanceAt for OracleAt<'_> {
    fn kernel_means(&self, points: &PointSet) -> Result<Vec<f64>> {
        self.oracle.kernel_means(&self.kernel_w, points)
    }

    fn embedding_norm_sq(&self) -> Result<f64> {
        self.oracle.kernel_mean_sq(&self.kernel_w)
    }

    fn representer_weights(&self) -> Option<&[f64]> {
        None
    }

    fn density(&self, z: &[f64]) -> Result<f64> {
        self.oracle.cond_density(self.kind, z)
    }
}

impl Nuisance for OracleNuisance<'_> {
    fn kernel_w(&self) -> &KernelSpec {
        &self.kernel_w
    }

    fn representers(&self) -> Option<&PointSet> {
        None
    }

    fn at(&self, c: &[f64]) -> Result<Box<dyn NuisanceAt + '_>> {
        Ok(Box::new(OracleAt { oracle: ContextOracle::new(self.model, c)?, kind: self.kind, kernel_w: self.kernel_w }))
    }

    fn is_exact(&self) -> bool {
        true
    }
}

/// ⟨μᵃ(c), μᵇ(c)⟩ for two nuisances evaluated at the same context.
pub fn embedding_inner(
    a: &dyn Nuisance,
    at_a: &dyn NuisanceAt,
    b: &dyn Nuisance,
    at_b: &dyn NuisanceAt,
) -> Result<f64> {
    match (a.representers(), at_a.representer_weights()) {
        (Some(pts), Some(wa)) => {
            let h = at_b.kernel_means(pts)?;
            Ok(h.iter().zip(wa).map(|(x, y)| x * y).sum())
        }
        _ => match (b.representers(), at_b.representer_weights()) {
            (Some(pts), Some(wb)) => {
                let h = at_a.kernel_means(pts)?;
                Ok(h.iter().zip(wb).map(|(x, y)| x * y).sum())
            }
            _ => Err(Error::Config("inner product of two non-finite embeddings is not available".into())),
        },
    }
}
