//! Stage II: reference measures, assembly of the cross-fitted (or split) least
//! squares system over the atom dictionary μ̂ᵏ(c_i) ⊗ φ(z̃_m), its closed-form
//! ridge minimizer, and evaluation of the resulting bridge.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, range_err, Error, Result};
use crate::kernel::{gram, ridge_solve, GramMatrix, KernelSpec, SpdFactor};
use crate::nuisance::{make_folds, CmeModel, FoldPartition, Nuisance, NuisanceAt, NuisancePair, NuisanceSettings};
use crate::points::PointSet;
use crate::rng::{derive_seed, rng_from_seed, tags};
use crate::stats::trapezoid_weights;
use crate::synthetic::CmrDataset;

/// Format version written into serialized bridges.
pub const BRIDGE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefMeasureKind {
    UniformBox,
}

/// Reference probability measure ν on Z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefMeasure {
    pub kind: RefMeasureKind,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl RefMeasure {
    pub fn uniform_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return range_err("box bounds must be nonempty and of equal length");
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::Degenerate("box has a zero-width coordinate".into()));
        }
        Ok(Self { kind: RefMeasureKind::UniformBox, lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).product()
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == self.dim() && z.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| l <= v && v <= u)
    }

    /// Smallest box containing both.
    pub fn hull(&self, other: &RefMeasure) -> Result<RefMeasure> {
        if other.dim() != self.dim() {
            return range_err("cannot combine boxes of different dimension");
        }
        Self::uniform_box(
            self.lower.iter().zip(&other.lower).map(|(a, b)| a.min(*b)).collect(),
            self.upper.iter().zip(&other.upper).map(|(a, b)| a.max(*b)).collect(),
        )
    }
}

/// Uniform box spanning the samples, widened by 10% of the range on each side.
pub fn build_ref_measure(aux_z: &PointSet) -> Result<RefMeasure> {
    build_ref_measure_trimmed(aux_z, 0.0)
}

/// Uniform box between the `trim` and `1 − trim` sample quantiles of each coordinate,
/// widened by 10% of that range on each side. `trim = 0` spans the samples.
pub fn build_ref_measure_trimmed(aux_z: &PointSet, trim: f64) -> Result<RefMeasure> {
    if !(0.0..0.5).contains(&trim) {
        return config_err(format!("box trim must lie in [0, 0.5), got {trim}"));
    }
    if aux_z.len() < 2 {
        return Err(Error::Degenerate(format!("reference box needs at least 2 samples, got {}", aux_z.len())));
    }
    let mut lower = Vec::with_capacity(aux_z.dim());
    let mut upper = Vec::with_capacity(aux_z.dim());
    for d in 0..aux_z.dim() {
        let mut v: Vec<f64> = aux_z.iter().map(|z| z[d]).collect();
        v.sort_by(f64::total_cmp);
        let last = (v.len() - 1) as f64;
        let (l, h) = (v[(last * trim).round() as usize], v[(last * (1.0 - trim)).round() as usize]);
        let range = h - l;
        if !(range > 0.0) {
            return Err(Error::Degenerate(format!("z coordinate {d} has zero range")));
        }
        lower.push(l - 0.1 * range);
        upper.push(h + 0.1 * range);
    }
    RefMeasure::uniform_box(lower, upper)
}

/// `m` i.i.d. draws from ν.
pub fn draw_reference(measure: &RefMeasure, m: usize, seed: u64) -> PointSet {
    let mut rng = rng_from_seed(seed);
    let d = measure.dim();
    let mut out = PointSet::with_capacity(d, m);
    let mut buf = vec![0.0; d];
    for _ in 0..m {
        for (k, b) in buf.iter_mut().enumerate() {
            let u: f64 = rng.random();
            *b = measure.lower[k] + u * (measure.upper[k] - measure.lower[k]);
        }
        out.push(&buf);
    }
    out
}

/// Tensor-product grid with trapezoid weights on each axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorGrid {
    axes: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
}

impl TensorGrid {
    /// Uniform grid with `n` points per axis spanning the closed box.
    pub fn over_box(lower: &[f64], upper: &[f64], n: usize) -> Result<Self> {
        Self::over_box_with(lower, upper, &vec![n; lower.len()])
    }

    pub fn over_box_with(lower: &[f64], upper: &[f64], counts: &[usize]) -> Result<Self> {
        if lower.len() != upper.len() || lower.len() != counts.len() || lower.is_empty() {
            return range_err("grid bounds and counts must have one entry per axis");
        }
        let mut axes = Vec::new();
        let mut weights = Vec::new();
        for ((&l, &u), &n) in lower.iter().zip(upper).zip(counts) {
            if n < 2 || !(l < u) {
                return config_err("each grid axis needs at least 2 points and positive width");
            }
            let h = (u - l) / (n - 1) as f64;
            axes.push((0..n).map(|i| l + h * i as f64).collect());
            weights.push(trapezoid_weights(n, h));
        }
        Ok(Self { axes, weights })
    }

    /// Grid over the concatenated coordinates of `self` followed by `other`.
    pub fn product(&self, other: &TensorGrid) -> TensorGrid {
        let mut axes = self.axes.clone();
        axes.extend(other.axes.iter().cloned());
        let mut weights = self.weights.clone();
        weights.extend(other.weights.iter().cloned());
        TensorGrid { axes, weights }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axis(&self, d: usize) -> &[f64] {
        &self.axes[d]
    }

    pub fn axis_weights(&self, d: usize) -> &[f64] {
        &self.weights[d]
    }

    pub fn min_points(&self) -> usize {
        self.axes.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn unravel(&self, mut flat: usize, out: &mut [usize]) {
        for d in (0..self.dim()).rev() {
            let n = self.axes[d].len();
            out[d] = flat % n;
            flat /= n;
        }
    }

    /// Grid points in row-major order (last axis fastest).
    pub fn points(&self) -> PointSet {
        let d = self.dim();
        let mut out = PointSet::with_capacity(d, self.len());
        let mut idx = vec![0; d];
        let mut p = vec![0.0; d];
        for flat in 0..self.len() {
            self.unravel(flat, &mut idx);
            for k in 0..d {
                p[k] = self.axes[k][idx[k]];
            }
            out.push(&p);
        }
        out
    }

    /// Quadrature weights in the order of [`TensorGrid::points`].
    pub fn point_weights(&self) -> Vec<f64> {
        let d = self.dim();
        let mut idx = vec![0; d];
        (0..self.len())
            .map(|flat| {
                self.unravel(flat, &mut idx);
                (0..d).map(|k| self.weights[k][idx[k]]).product()
            })
            .collect()
    }
}

/// A function b(w, z) of the bridge arguments.
pub trait Bridge: Sync {
    fn w_dim(&self) -> usize;
    fn z_dim(&self) -> usize;
    fn eval(&self, w: &[f64], z: &[f64]) -> f64;

    /// b(w, z) at every point of `grid`, in [`TensorGrid::points`] order.
    fn eval_grid(&self, w: &[f64], grid: &TensorGrid) -> Vec<f64> {
        grid.points().iter().map(|z| self.eval(w, z)).collect()
    }

    /// (1/|ws|) Σ_w b(w, z) at every point of `grid`.
    fn eval_grid_averaged(&self, ws: &PointSet, grid: &TensorGrid) -> Vec<f64> {
        let pts = grid.points();
        let n = ws.len() as f64;
        pts.iter().map(|z| ws.iter().map(|w| self.eval(w, z)).sum::<f64>() / n).collect()
    }
}

/// One element μ(c) = Σ_j β_j φ(x_j) of H_W, stored as weights over a shared support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEmbedding {
    pub fold: usize,
    /// Dataset index of the context (or a running index for synthetic contexts).
    pub source_index: usize,
    /// Index into [`EmbeddingBasis::supports`].
    pub support: usize,
    pub weights: Vec<f64>,
}

/// The W-side representers of all atoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBasis {
    pub kernel_w: KernelSpec,
    pub points: PointSet,
    /// Lists of positions in `points`.
    pub supports: Vec<Vec<usize>>,
    pub contexts: Vec<ContextEmbedding>,
}

impl EmbeddingBasis {
    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    fn check(&self) -> Result<()> {
        for (i, c) in self.contexts.iter().enumerate() {
            let Some(s) = self.supports.get(c.support) else {
                return range_err(format!("context {i} references a missing support"));
            };
            if s.len() != c.weights.len() || s.iter().any(|&j| j >= self.points.len()) {
                return range_err(format!("context {i} has inconsistent support weights"));
            }
        }
        Ok(())
    }

    /// Dense n_ctx × n_points matrix of embedding weights.
    fn dense_weights(&self) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.len(), self.points.len());
        for (c, ctx) in self.contexts.iter().enumerate() {
            for (&j, &b) in self.supports[ctx.support].iter().zip(&ctx.weights) {
                e[(c, j)] += b;
            }
        }
        e
    }

    /// Projection of a vector over `points` onto every context: (β_c · v[supp_c])_c.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.contexts
            .iter()
            .map(|ctx| self.supports[ctx.support].iter().zip(&ctx.weights).map(|(&j, b)| b * v[j]).sum())
            .collect()
    }

    fn support_mass(&self) -> usize {
        self.contexts.iter().map(|c| c.weights.len()).sum()
    }

    /// |A| × n_ctx matrix with entries ⟨φ(a), μ_c⟩ = Σ_j β_cj k_W(a, x_j).
    pub fn kernel_against(&self, a: &PointSet) -> Result<DMatrix<f64>> {
        if a.dim() != self.points.dim() {
            return range_err("point dimension does not match the W space");
        }
        let dense_cost = self.points.len() as f64 * self.len() as f64;
        if (self.support_mass() as f64) > 0.25 * dense_cost {
            let k = gram(&self.kernel_w, a, &self.points)?;
            Ok(k.entries() * self.dense_weights().transpose())
        } else {
            let mut out = DMatrix::zeros(a.len(), self.len());
            for (c, ctx) in self.contexts.iter().enumerate() {
                let sup = &self.supports[ctx.support];
                for (i, p) in a.iter().enumerate() {
                    let mut acc = 0.0;
                    for (&j, b) in sup.iter().zip(&ctx.weights) {
                        acc += b * self.kernel_w.eval(p, self.points.row(j));
                    }
                    out[(i, c)] = acc;
                }
            }
            Ok(out)
        }
    }

    /// n_ctx × n_ctx' matrix of ⟨μ_c, μ'_c'⟩.
    pub fn cross_gram(&self, other: &EmbeddingBasis) -> Result<DMatrix<f64>> {
        if self.kernel_w != other.kernel_w {
            return config_err("embedding bases use different W kernels");
        }
        let dense_self = (self.support_mass() as f64) > 0.25 * self.points.len() as f64 * self.len() as f64;
        if dense_self {
            let right = other.kernel_against(&self.points)?;
            Ok(self.dense_weights() * right)
        } else {
            let left = self.kernel_against(&other.points)?;
            Ok((other.dense_weights() * left).transpose())
        }
    }
}

/// An atom μ̂ᵏ(c_i) ⊗ φ(z̃) of the Stage II dictionary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeAtom {
    pub fold: usize,
    /// Index into the basis contexts.
    pub context: usize,
    /// Dataset index i of the context c_i.
    pub source_index: usize,
    pub z: Vec<f64>,
    /// p̂ᵏ(z̃ | c_i).
    pub target: f64,
}

/// One held-out fold of the Stage II objective: every held-out context of the fold
/// paired with every reference draw of the fold.
#[derive(Clone, Debug)]
pub struct CriterionBlock {
    pub fold: usize,
    /// Basis contexts of the held-out samples.
    pub contexts: Vec<usize>,
    /// Dataset indices of the held-out samples.
    pub source_indices: Vec<usize>,
    pub draws: PointSet,
    /// p̂ᵏ(z̃_m | c_i), contexts × draws.
    pub targets: DMatrix<f64>,
}

impl CriterionBlock {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// The Stage II problem: the atom dictionary spanning the bridge class, and the
/// residual terms of the objective.
///
/// Without capping the dictionary holds one atom per residual term. With capping the
/// bridge is restricted to the span of the retained atoms, while the objective keeps
/// every term; the fit then solves the normal equations of that restricted problem.
#[derive(Clone, Debug)]
pub struct BridgeSystem {
    /// Dictionary Gram matrix.
    pub gram: GramMatrix,
    /// Targets of the dictionary atoms.
    pub targets: Vec<f64>,
    pub atoms: Vec<BridgeAtom>,
    pub basis: Arc<EmbeddingBasis>,
    pub kernel_z: KernelSpec,
    /// ⟨μ_c, μ_c'⟩ between all basis contexts.
    pub context_gram: DMatrix<f64>,
    pub blocks: Vec<CriterionBlock>,
    /// Number of residual terms in the objective.
    pub full_atom_count: usize,
    /// True when the dictionary holds every residual term.
    pub complete: bool,
    /// SᵀS and Sᵀy, where S maps dictionary coefficients to residual-term values;
    /// only formed for capped dictionaries.
    normal: Option<(DMatrix<f64>, DVector<f64>)>,
    pub measures: Vec<RefMeasure>,
    /// Training indices of each fold's nuisances.
    pub nuisance_indices: Vec<Vec<usize>>,
}

/// One fold of the Stage II objective: its held-out indices, the nuisances fit
/// without them, and its reference measure.
pub struct FoldPlan<'a> {
    pub held_out: &'a [usize],
    pub nuisance: &'a NuisancePair,
    pub measure: RefMeasure,
}

/// Dictionary and sampling settings of Stage II.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Settings {
    pub m_per_fold: usize,
    pub dictionary_cap: usize,
    /// Quantile trimmed from each end of every z coordinate when building the
    /// reference box (see [`build_ref_measure_trimmed`]).
    pub box_trim: f64,
}

impl Default for Stage2Settings {
    fn default() -> Self {
        Self { m_per_fold: 50, dictionary_cap: 2000, box_trim: 0.02 }
    }
}

/// Builds the dictionary, its Gram matrix and the objective blocks.
pub fn assemble_system(
    data: &CmrDataset,
    plans: &[FoldPlan<'_>],
    settings: &Stage2Settings,
    kernel_z: KernelSpec,
    seed: u64,
) -> Result<BridgeSystem> {
    if plans.is_empty() || plans.iter().any(|p| p.held_out.is_empty()) {
        return config_err("every fold must hold out at least one sample");
    }
    if settings.m_per_fold < 1 || settings.dictionary_cap < 1 {
        return config_err("m_per_fold and dictionary_cap must be positive");
    }
    let kernel_w = *plans[0].nuisance.cme.kernel_w();
    if plans.iter().any(|p| *p.nuisance.cme.kernel_w() != kernel_w) {
        return config_err("all folds must share the W kernel");
    }
    for (k, p) in plans.iter().enumerate() {
        if p.measure.dim() != data.z.dim() {
            return range_err(format!("reference measure of fold {k} has the wrong dimension"));
        }
    }
    let m = settings.m_per_fold;
    let fold_draws: Vec<PointSet> = plans
        .iter()
        .enumerate()
        .map(|(k, p)| draw_reference(&p.measure, m, derive_seed(seed, &[tags::REFERENCE, k as u64])))
        .collect();

    // global W support: union of all nuisance training samples
    let mut union: Vec<usize> = plans.iter().flat_map(|p| p.nuisance.train_indices().iter().copied()).collect();
    union.sort_unstable();
    union.dedup();
    let position: BTreeMap<usize, usize> = union.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let points = data.w.select(&union);
    let supports: Vec<Vec<usize>> =
        plans.iter().map(|p| p.nuisance.train_indices().iter().map(|i| position[i]).collect()).collect();

    // every held-out context, fold by fold, with its objective block
    let mut contexts = Vec::new();
    let mut blocks = Vec::with_capacity(plans.len());
    for (k, plan) in plans.iter().enumerate() {
        let cs = data.c.select(plan.held_out);
        let beta = plan.nuisance.cme.weights_batch(&cs)?;
        let offset = contexts.len();
        let mut targets = DMatrix::zeros(plan.held_out.len(), m);
        for (pos, &src) in plan.held_out.iter().enumerate() {
            contexts.push(ContextEmbedding {
                fold: k,
                source_index: src,
                support: k,
                weights: beta.column(pos).iter().copied().collect(),
            });
            let mean = plan.nuisance.density.mean(cs.row(pos))?;
            for d in 0..m {
                targets[(pos, d)] = plan.nuisance.density.density_at_mean(&mean, fold_draws[k].row(d));
            }
        }
        blocks.push(CriterionBlock {
            fold: k,
            contexts: (offset..contexts.len()).collect(),
            source_indices: plan.held_out.to_vec(),
            draws: fold_draws[k].clone(),
            targets,
        });
    }
    let basis = EmbeddingBasis { kernel_w, points, supports, contexts };

    let (atoms, complete) = choose_atoms(&blocks, settings.dictionary_cap, derive_seed(seed, &[tags::DICTIONARY]));
    let mut sys = BridgeSystem::with_blocks(basis, atoms, kernel_z, blocks, complete)?;
    sys.measures = plans.iter().map(|p| p.measure.clone()).collect();
    sys.nuisance_indices = plans.iter().map(|p| p.nuisance.train_indices().to_vec()).collect();
    Ok(sys)
}

/// The dictionary over the residual terms of `blocks`: every term when there are at
/// most `cap`, otherwise a uniform sample of `cap` terms without replacement.
/// Returns the atoms and whether the dictionary is complete.
pub(crate) fn choose_atoms(blocks: &[CriterionBlock], cap: usize, seed: u64) -> (Vec<BridgeAtom>, bool) {
    // (block, context position, draw), flattened block-major
    let total: usize = blocks.iter().map(CriterionBlock::len).sum();
    let complete = total <= cap;
    let chosen: Vec<usize> = if complete {
        (0..total).collect()
    } else {
        let mut v = rand::seq::index::sample(&mut rng_from_seed(seed), total, cap).into_vec();
        v.sort_unstable();
        v
    };
    let mut atoms = Vec::with_capacity(chosen.len());
    let (mut k, mut offset) = (0, 0);
    for flat in chosen {
        while flat >= offset + blocks[k].len() {
            offset += blocks[k].len();
            k += 1;
        }
        let b = &blocks[k];
        let m = b.draws.len();
        let (pos, d) = ((flat - offset) / m, (flat - offset) % m);
        atoms.push(BridgeAtom {
            fold: b.fold,
            context: b.contexts[pos],
            source_index: b.source_indices[pos],
            z: b.draws.row(d).to_vec(),
            target: b.targets[(pos, d)],
        });
    }
    (atoms, complete)
}

fn atom_gram(atoms: &[BridgeAtom], s: &DMatrix<f64>, kernel_z: &KernelSpec) -> DMatrix<f64> {
    let n = atoms.len();
    let mut g = DMatrix::zeros(n, n);
    for j in 0..n {
        let (aj, zj) = (atoms[j].context, &atoms[j].z);
        for i in 0..=j {
            let v = s[(atoms[i].context, aj)] * kernel_z.eval(&atoms[i].z, zj);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// k_Z between the rows of `a` and `b`.
fn z_cross(kernel_z: &KernelSpec, a: &PointSet, b: &PointSet) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| kernel_z.eval(a.row(i), b.row(j)))
}

impl BridgeSystem {
    /// System over explicitly supplied embeddings and atoms, with one objective term
    /// per atom; fold bookkeeping is left empty.
    pub fn from_parts(basis: EmbeddingBasis, atoms: Vec<BridgeAtom>, kernel_z: KernelSpec) -> Result<Self> {
        let blocks = atoms
            .iter()
            .map(|a| CriterionBlock {
                fold: a.fold,
                contexts: vec![a.context],
                source_indices: vec![a.source_index],
                draws: PointSet::from_rows(std::slice::from_ref(&a.z)).expect("one nonempty row"),
                targets: DMatrix::from_element(1, 1, a.target),
            })
            .collect();
        Self::with_blocks(basis, atoms, kernel_z, blocks, true)
    }

    /// System over explicit objective blocks and a dictionary drawn from them;
    /// `complete` states that the dictionary holds every residual term.
    pub fn with_blocks(
        basis: EmbeddingBasis,
        atoms: Vec<BridgeAtom>,
        kernel_z: KernelSpec,
        blocks: Vec<CriterionBlock>,
        complete: bool,
    ) -> Result<Self> {
        basis.check()?;
        if atoms.is_empty() {
            return config_err("a bridge system needs at least one atom");
        }
        let dz = atoms[0].z.len();
        if atoms.iter().any(|a| a.context >= basis.len() || a.z.len() != dz) {
            return range_err("atoms must reference existing contexts and share one z dimension");
        }
        if blocks.iter().any(|b| b.contexts.iter().any(|&c| c >= basis.len()) || b.draws.dim() != dz) {
            return range_err("objective blocks must reference existing contexts and match the z dimension");
        }
        let context_gram = basis.cross_gram(&basis)?;
        let gram = atom_gram(&atoms, &context_gram, &kernel_z);
        let full_atom_count = blocks.iter().map(CriterionBlock::len).sum();
        let mut sys = BridgeSystem {
            gram: GramMatrix::from_matrix(gram),
            targets: atoms.iter().map(|a| a.target).collect(),
            atoms,
            basis: Arc::new(basis),
            kernel_z,
            context_gram,
            blocks,
            full_atom_count,
            complete,
            normal: None,
            measures: Vec::new(),
            nuisance_indices: Vec::new(),
        };
        if !complete {
            sys.normal = Some(sys.normal_equations());
        }
        Ok(sys)
    }

    /// SᵀS and Sᵀy, accumulated fold by fold: within a block the value of atom a at
    /// term (i, m) factors as ⟨μ̂(c_i), μ_{c_a}⟩ · k_Z(z̃_m, z_a), so the block's
    /// share of SᵀS is the elementwise product of two small Gram products.
    fn normal_equations(&self) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.atoms.len();
        let mut sts = DMatrix::zeros(d, d);
        let mut sty = DVector::zeros(d);
        let atom_z = self.atom_points();
        for b in &self.blocks {
            let cg =
                DMatrix::from_fn(b.contexts.len(), d, |i, a| self.context_gram[(b.contexts[i], self.atoms[a].context)]);
            let kz = z_cross(&self.kernel_z, &b.draws, &atom_z);
            let a_k = cg.transpose() * &cg;
            let b_k = kz.transpose() * &kz;
            sts += a_k.component_mul(&b_k);
            let yk = &b.targets * &kz;
            for a in 0..d {
                sty[a] += cg.column(a).dot(&yk.column(a));
            }
        }
        (sts, sty)
    }

    fn atom_points(&self) -> PointSet {
        let mut p = PointSet::with_capacity(self.atoms[0].z.len(), self.atoms.len());
        for atom in &self.atoms {
            p.push(&atom.z);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Values of the bridge with dictionary coefficients α at every objective term,
    /// one contexts × draws matrix per block.
    pub fn block_values(&self, alpha: &[f64]) -> Vec<DMatrix<f64>> {
        let atom_z = self.atom_points();
        self.blocks
            .iter()
            .map(|b| {
                let cg = DMatrix::from_fn(b.contexts.len(), alpha.len(), |i, a| {
                    alpha[a] * self.context_gram[(b.contexts[i], self.atoms[a].context)]
                });
                cg * z_cross(&self.kernel_z, &b.draws, &atom_z).transpose()
            })
            .collect()
    }

    /// Values of an arbitrary fitted bridge at every objective term, via the
    /// embeddings of this system: ⟨μ̂ᵏ(c_i) ⊗ φ(z̃_m), b⟩.
    pub fn block_values_of(&self, b: &BridgeEstimate) -> Result<Vec<DMatrix<f64>>> {
        if b.kernel_z != self.kernel_z {
            return config_err("bridge and system use different Z kernels");
        }
        let x = self.basis.cross_gram(&b.basis)?;
        Ok(self
            .blocks
            .iter()
            .map(|blk| {
                let cg = DMatrix::from_fn(blk.contexts.len(), b.len(), |i, l| {
                    b.alpha[l] * x[(blk.contexts[i], b.atom_context[l])]
                });
                cg * z_cross(&self.kernel_z, &blk.draws, &b.atom_z).transpose()
            })
            .collect())
    }

    /// Per-block mean squared residuals L̂_k.
    pub fn block_losses(&self, values: &[DMatrix<f64>]) -> Vec<f64> {
        self.blocks.iter().zip(values).map(|(b, v)| (v - &b.targets).norm_squared() / b.len() as f64).collect()
    }

    /// Mean squared residual over every objective term.
    fn loss(&self, values: &[DMatrix<f64>]) -> f64 {
        let sum: f64 = self.blocks.iter().zip(values).map(|(b, v)| (v - &b.targets).norm_squared()).sum();
        sum / self.full_atom_count as f64
    }

    /// L̂(α) + λ αᵀGα for coefficients on this system's dictionary.
    pub fn objective(&self, alpha: &[f64], lambda: f64) -> f64 {
        let a = DVector::from_column_slice(alpha);
        let ga = self.gram.entries() * &a;
        self.loss(&self.block_values(alpha)) + lambda * a.dot(&ga)
    }

    /// ⟨μ̂(c_l) ⊗ φ(z̃_l), b⟩ for every dictionary atom l and any fitted bridge b.
    pub fn atom_values(&self, b: &BridgeEstimate) -> Result<Vec<f64>> {
        if b.kernel_z != self.kernel_z {
            return config_err("bridge and system use different Z kernels");
        }
        let s = self.basis.cross_gram(&b.basis)?;
        Ok(self
            .atoms
            .iter()
            .map(|atom| {
                b.atom_context
                    .iter()
                    .zip(b.atom_z.iter())
                    .zip(&b.alpha)
                    .map(|((&c, z), a)| a * s[(atom.context, c)] * self.kernel_z.eval(&atom.z, z))
                    .sum()
            })
            .collect())
    }

    /// Mean squared residual over every objective term plus λ‖b‖², for any fitted bridge.
    pub fn objective_of(&self, b: &BridgeEstimate, lambda: f64) -> Result<f64> {
        Ok(self.loss(&self.block_values_of(b)?) + lambda * b.rkhs_norm_sq)
    }
}

/// The closed-form minimizer of L̂(α) + λ αᵀGα over the dictionary span. For a complete
/// dictionary this is α = (G + nλI)⁻¹ y with n residual terms; for a capped one it is
/// the solution of (SᵀS + nλG) α = Sᵀy.
pub fn fit_bridge_crossfit(system: &BridgeSystem, lambda: f64) -> Result<BridgeEstimate> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return config_err(format!("stage-two ridge must be positive, got {lambda}"));
    }
    let n = system.full_atom_count as f64;
    let (alpha, jitter) = match &system.normal {
        None => {
            let sol = ridge_solve(&system.gram, &system.targets, n * lambda)?;
            (sol.alpha, sol.jitter)
        }
        Some((sts, sty)) => {
            let lhs = sts + system.gram.entries() * (n * lambda);
            let factor = SpdFactor::new(&lhs, 0.0)?;
            (factor.solve_vec(sty.as_slice()), factor.jitter())
        }
    };
    let a = DVector::from_column_slice(&alpha);
    let norm = a.dot(&(system.gram.entries() * &a)).max(0.0);
    Ok(BridgeEstimate {
        basis: Arc::clone(&system.basis),
        atom_context: system.atoms.iter().map(|a| a.context).collect(),
        atom_z: system.atom_points(),
        alpha,
        lambda,
        kernel_z: system.kernel_z,
        rkhs_norm_sq: norm,
        jitter,
    })
}

/// A fitted bridge b(w, z) = Σ_l α_l ⟨μ_{c_l}, φ(w)⟩ k_Z(z̃_l, z).
#[derive(Clone, Debug)]
pub struct BridgeEstimate {
    pub basis: Arc<EmbeddingBasis>,
    pub atom_context: Vec<usize>,
    pub atom_z: PointSet,
    pub alpha: Vec<f64>,
    pub lambda: f64,
    pub kernel_z: KernelSpec,
    /// αᵀGα = ‖b‖² in the tensor-product RKHS.
    pub rkhs_norm_sq: f64,
    pub jitter: f64,
}

impl BridgeEstimate {
    /// Assembles a bridge from explicit parts, checking consistency.
    pub fn from_parts(
        basis: EmbeddingBasis,
        atom_context: Vec<usize>,
        atom_z: PointSet,
        alpha: Vec<f64>,
        lambda: f64,
        kernel_z: KernelSpec,
    ) -> Result<Self> {
        basis.check()?;
        if atom_context.len() != alpha.len() || atom_z.len() != alpha.len() {
            return range_err("atom contexts, draws and coefficients must have equal length");
        }
        if atom_context.iter().any(|&c| c >= basis.len()) {
            return range_err("atom references a missing context");
        }
        let mut b = Self {
            basis: Arc::new(basis),
            atom_context,
            atom_z,
            alpha,
            lambda,
            kernel_z,
            rkhs_norm_sq: 0.0,
            jitter: 0.0,
        };
        b.rkhs_norm_sq = b.norm_sq_direct()?;
        Ok(b)
    }

    /// Same atoms with different coefficients.
    pub fn with_alpha(&self, alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != self.alpha.len() {
            return range_err("coefficient vector has the wrong length");
        }
        let mut b = Self { alpha, ..self.clone() };
        b.rkhs_norm_sq = b.norm_sq_direct()?;
        Ok(b)
    }

    fn norm_sq_direct(&self) -> Result<f64> {
        let s = self.basis.cross_gram(&self.basis)?;
        let n = self.alpha.len();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += self.alpha[i]
                    * self.alpha[j]
                    * s[(self.atom_context[i], self.atom_context[j])]
                    * self.kernel_z.eval(self.atom_z.row(i), self.atom_z.row(j));
            }
        }
        Ok(acc.max(0.0))
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// γ_l = α_l ⟨μ_{c_l}, v⟩ given a vector v of values over the basis points,
    /// where v_j = ⟨φ(x_j), g⟩ for the W-side element g.
    fn coefficients_from_point_values(&self, v: &[f64]) -> Vec<f64> {
        let pi = self.basis.project(v);
        self.coefficients_from_projection(&pi)
    }

    /// γ_l = α_l π_{c_l} from per-context projections π.
    pub fn coefficients_from_projection(&self, pi: &[f64]) -> Vec<f64> {
        self.alpha.iter().zip(&self.atom_context).map(|(a, &c)| a * pi[c]).collect()
    }

    /// Σ_l γ_l k_Z(z̃_l, z).
    pub fn contract_z(&self, gamma: &[f64], z: &[f64]) -> f64 {
        gamma
            .iter()
            .zip(self.atom_z.iter())
            .map(|(g, zl)| if *g == 0.0 { 0.0 } else { g * self.kernel_z.eval(zl, z) })
            .sum()
    }

    /// Σ_l γ_l k_Z(z̃_l, z) over a tensor grid, using the product structure of the Gaussian kernel.
    pub fn contract_grid(&self, gamma: &[f64], grid: &TensorGrid) -> Vec<f64> {
        let d = grid.dim();
        let l = gamma.len();
        let h2 = 2.0 * self.kernel_z.bandwidth * self.kernel_z.bandwidth;
        // per-axis factor tables exp(-(z̃_ld - g)² / 2h²)
        let tables: Vec<DMatrix<f64>> = (0..d)
            .map(|k| {
                let ax = grid.axis(k);
                DMatrix::from_fn(l, ax.len(), |i, j| {
                    let v = self.atom_z.row(i)[k] - ax[j];
                    (-v * v / h2).exp()
                })
            })
            .collect();
        let split = d / 2;
        let combine = |range: std::ops::Range<usize>, scale: Option<&[f64]>| -> DMatrix<f64> {
            let cols: usize = range.clone().map(|k| grid.axis(k).len()).product();
            let mut out = DMatrix::from_element(l, cols, 1.0);
            if let Some(s) = scale {
                for i in 0..l {
                    out.row_mut(i).fill(s[i]);
                }
            }
            let mut stride = cols;
            for k in range {
                let n = grid.axis(k).len();
                stride /= n;
                for col in 0..cols {
                    let j = (col / stride) % n;
                    for i in 0..l {
                        out[(i, col)] *= tables[k][(i, j)];
                    }
                }
            }
            out
        };
        let left = combine(0..split, Some(gamma));
        let right = combine(split..d, None);
        let q = left.transpose() * right;
        // row-major flattening: first-half axes are the slow index
        let mut out = Vec::with_capacity(q.nrows() * q.ncols());
        for i in 0..q.nrows() {
            for j in 0..q.ncols() {
                out.push(q[(i, j)]);
            }
        }
        out
    }

    /// γ for b(w, ·).
    pub fn coefficients_at(&self, w: &[f64]) -> Vec<f64> {
        let v: Vec<f64> = self.basis.points.iter().map(|x| self.basis.kernel_w.eval(x, w)).collect();
        self.coefficients_from_point_values(&v)
    }

    /// γ for (1/|ws|) Σ_w b(w, ·).
    pub fn coefficients_averaged(&self, ws: &PointSet) -> Vec<f64> {
        let n = ws.len() as f64;
        let v: Vec<f64> = self
            .basis
            .points
            .iter()
            .map(|x| ws.iter().map(|w| self.basis.kernel_w.eval(x, w)).sum::<f64>() / n)
            .collect();
        self.coefficients_from_point_values(&v)
    }

    /// Per-context projections ⟨μ(c), μ_{c_l}⟩ for a nuisance evaluated at some c.
    pub fn projections(&self, nuisance: &dyn Nuisance, at: &dyn NuisanceAt) -> Result<Vec<f64>> {
        if *nuisance.kernel_w() != self.basis.kernel_w {
            return config_err("nuisance and bridge use different W kernels");
        }
        let h = at.kernel_means(&self.basis.points)?;
        Ok(self.basis.project(&h))
    }

    /// Serializable snapshot.
    pub fn to_artifact(&self) -> BridgeArtifact {
        BridgeArtifact {
            version: BRIDGE_FORMAT_VERSION,
            basis: (*self.basis).clone(),
            atom_context: self.atom_context.clone(),
            atom_z: self.atom_z.clone(),
            alpha: self.alpha.clone(),
            lambda: self.lambda,
            kernel_z: self.kernel_z,
            rkhs_norm_sq: self.rkhs_norm_sq,
        }
    }

    pub fn from_artifact(a: BridgeArtifact) -> Result<Self> {
        if a.version != BRIDGE_FORMAT_VERSION {
            return config_err(format!("unsupported bridge format version {}", a.version));
        }
        let norm = a.rkhs_norm_sq;
        let mut b = Self::from_parts(a.basis, a.atom_context, a.atom_z, a.alpha, a.lambda, a.kernel_z)?;
        if (b.rkhs_norm_sq - norm).abs() > 1e-8 * (1.0 + norm) {
            return config_err("stored RKHS norm does not match the stored coefficients");
        }
        b.rkhs_norm_sq = norm;
        Ok(b)
    }
}

/// On-disk form of a [`BridgeEstimate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeArtifact {
    pub version: u32,
    pub basis: EmbeddingBasis,
    pub atom_context: Vec<usize>,
    pub atom_z: PointSet,
    pub alpha: Vec<f64>,
    pub lambda: f64,
    pub kernel_z: KernelSpec,
    pub rkhs_norm_sq: f64,
}

impl Bridge for BridgeEstimate {
    fn w_dim(&self) -> usize {
        self.basis.points.dim()
    }

    fn z_dim(&self) -> usize {
        self.atom_z.dim()
    }

    fn eval(&self, w: &[f64], z: &[f64]) -> f64 {
        self.contract_z(&self.coefficients_at(w), z)
    }

    fn eval_grid(&self, w: &[f64], grid: &TensorGrid) -> Vec<f64> {
        self.contract_grid(&self.coefficients_at(w), grid)
    }

    fn eval_grid_averaged(&self, ws: &PointSet, grid: &TensorGrid) -> Vec<f64> {
        self.contract_grid(&self.coefficients_averaged(ws), grid)
    }
}

/// b(w, z).
pub fn bridge_eval(b: &BridgeEstimate, w: &[f64], z: &[f64]) -> Result<f64> {
    if w.len() != b.w_dim() || z.len() != b.z_dim() {
        return range_err("argument dimensions do not match the bridge");
    }
    Ok(b.eval(w, z))
}

/// Ê[b(W, z) | C = c] = Σ_l α_l ⟨μ̂(c), μ_{c_l}⟩ k_Z(z̃_l, z) under the embedding `cme`.
pub fn bridge_cond_exp(b: &BridgeEstimate, cme: &CmeModel, c: &[f64], z: &[f64]) -> Result<f64> {
    if *cme.kernel_w() != b.basis.kernel_w {
        return config_err("embedding and bridge use different W kernels");
    }
    if z.len() != b.z_dim() {
        return range_err("z dimension does not match the bridge");
    }
    let beta = cme.weights(c)?;
    let k = b.basis.kernel_against(cme.train_w())?;
    let pi: Vec<f64> =
        (0..b.basis.len()).map(|j| beta.iter().enumerate().map(|(i, bi)| bi * k[(i, j)]).sum()).collect();
    Ok(b.contract_z(&b.coefficients_from_projection(&pi), z))
}

/// Conditional mean of the first coordinate of z under the density recovered from
/// the stage-one transition bridge at action `u`, with m averaged over `m_samples`:
/// q(z) = mean_m b((u, m), z), clipped at zero and renormalized on the grid.
pub fn deconfounded_summary(b: &dyn Bridge, m_samples: &PointSet, u: u8, grid: &TensorGrid) -> Result<f64> {
    if grid.min_points() < 8 {
        return config_err("summary grid needs at least 8 points per axis");
    }
    if grid.dim() != b.z_dim() || m_samples.dim() + 1 != b.w_dim() {
        return range_err("grid or measurement dimension does not match the bridge");
    }
    if m_samples.is_empty() {
        return config_err("at least one measurement sample is required");
    }
    let mut ws = PointSet::with_capacity(b.w_dim(), m_samples.len());
    let mut buf = Vec::with_capacity(b.w_dim());
    for m in m_samples.iter() {
        buf.clear();
        buf.push(f64::from(u));
        buf.extend_from_slice(m);
        ws.push(&buf);
    }
    let q = b.eval_grid_averaged(&ws, grid);
    let weights = grid.point_weights();
    let first = grid.axis(0);
    let stride = grid.len() / first.len();
    let mut mass = 0.0;
    let mut moment = 0.0;
    for (flat, (qv, w)) in q.iter().zip(&weights).enumerate() {
        let v = qv.max(0.0) * w;
        mass += v;
        moment += v * first[flat / stride];
    }
    if !(mass > 1e-300) || !mass.is_finite() {
        return Err(Error::Degenerate("recovered density has no positive mass on the grid".into()));
    }
    Ok(moment / mass)
}

/// Nuisances, folds and the assembled system of one fit.
pub struct PreparedFit {
    pub system: BridgeSystem,
    pub nuisances: Vec<NuisancePair>,
    pub partition: FoldPartition,
    /// Which folds are held out in the Stage II objective.
    pub criterion_folds: Vec<usize>,
}

/// W and Z kernels shared by every fold.
pub fn shared_kernels(data: &CmrDataset) -> Result<(KernelSpec, KernelSpec)> {
    Ok((KernelSpec::gaussian_median(&data.w)?, KernelSpec::gaussian_median(&data.z)?))
}

/// K-fold cross-fitting: nuisances for fold k are fit on its complement and the
/// objective averages the K held-out losses.
pub fn prepare_crossfit(
    data: &CmrDataset,
    k: usize,
    nuisance: &NuisanceSettings,
    stage2: &Stage2Settings,
    seed: u64,
) -> Result<PreparedFit> {
    let partition = make_folds(data.len(), k, derive_seed(seed, &[tags::FOLDS]))?;
    let (kernel_w, kernel_z) = shared_kernels(data)?;
    let nuisances = (0..k)
        .map(|f| NuisancePair::fit(data, &partition.complement(f), kernel_w, nuisance, f))
        .collect::<Result<Vec<_>>>()?;
    let plans = (0..k)
        .map(|f| {
            Ok(FoldPlan {
                held_out: partition.fold(f),
                nuisance: &nuisances[f],
                measure: build_ref_measure_trimmed(&data.z.select(nuisances[f].train_indices()), stage2.box_trim)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let system = assemble_system(data, &plans, stage2, kernel_z, seed)?;
    drop(plans);
    Ok(PreparedFit { system, nuisances, partition, criterion_folds: (0..k).collect() })
}

/// One-shot 50–50 split: nuisances on one random half, the objective on the other.
pub fn prepare_split(
    data: &CmrDataset,
    nuisance: &NuisanceSettings,
    stage2: &Stage2Settings,
    seed: u64,
) -> Result<PreparedFit> {
    let partition = make_folds(data.len(), 2, derive_seed(seed, &[tags::FOLDS]))?;
    let (kernel_w, kernel_z) = shared_kernels(data)?;
    let pair = NuisancePair::fit(data, partition.fold(1), kernel_w, nuisance, 0)?;
    let plan = FoldPlan {
        held_out: partition.fold(0),
        nuisance: &pair,
        measure: build_ref_measure_trimmed(&data.z.select(pair.train_indices()), stage2.box_trim)?,
    };
    let system = assemble_system(data, std::slice::from_ref(&plan), stage2, kernel_z, seed)?;
    drop(plan);
    Ok(PreparedFit { system, nuisances: vec![pair], partition, criterion_folds: vec![0] })
}

/// Convenience wrapper: split preparation followed by the closed-form fit.
pub fn fit_bridge_split(
    data: &CmrDataset,
    nuisance: &NuisanceSettings,
    stage2: &Stage2Settings,
    lambda: f64,
    seed: u64,
) -> Result<BridgeEstimate> {
    fit_bridge_crossfit(&prepare_split(data, nuisance, stage2, seed)?.system, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::gram_sym;
    use crate::synthetic::{
        extract_cmr, observed, sample_dataset, CmrKind, FiniteLatentPomdp, FiniteLatentSpec, GaussianPomdp, PomdpSpec,
    };

    /// Two-coordinate observations, so z is four-dimensional.
    fn small_data(n: usize, seed: u64) -> CmrDataset {
        let model =
            GaussianPomdp::new(PomdpSpec { proxy_dim: 1, confounder_prob: 0.5, ..PomdpSpec::default() }).unwrap();
        extract_cmr(&observed(&sample_dataset(&model, n, seed)), 1, CmrKind::Transition).unwrap()
    }

    fn settings(m: usize, cap: usize) -> Stage2Settings {
        Stage2Settings { m_per_fold: m, dictionary_cap: cap, box_trim: 0.0 }
    }

    #[test]
    fn reference_box_widens_range_by_ten_percent() {
        let z = PointSet::from_rows(&[vec![0.0, -1.0], vec![2.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let nu = build_ref_measure(&z).unwrap();
        assert_eq!(nu.lower, vec![-0.2, -1.2]);
        assert_eq!(nu.upper, vec![2.2, 1.2]);
        assert!((nu.volume() - 2.4 * 2.4).abs() < 1e-12);
        let flat = PointSet::from_rows(&[vec![0.0, 1.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(build_ref_measure(&flat), Err(Error::Degenerate(_))));
    }

    #[test]
    fn reference_draws_are_inside_and_reproducible() {
        let nu = RefMeasure::uniform_box(vec![-1.0, 3.0], vec![0.0, 5.0]).unwrap();
        let a = draw_reference(&nu, 500, 9);
        assert_eq!(a, draw_reference(&nu, 500, 9));
        assert_ne!(a, draw_reference(&nu, 500, 10));
        assert!(a.iter().all(|z| nu.contains(z)));
        let mean0 = a.iter().map(|z| z[0]).sum::<f64>() / 500.0;
        assert!((mean0 + 0.5).abs() < 0.05);
    }

    #[test]
    fn grid_points_and_weights_are_row_major() {
        let g = TensorGrid::over_box(&[0.0, 10.0], &[1.0, 12.0], 3).unwrap();
        let p = g.points();
        assert_eq!(p.row(1), &[0.0, 11.0]);
        assert_eq!(p.row(3), &[0.5, 10.0]);
        let w = g.point_weights();
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!(TensorGrid::over_box(&[0.0], &[1.0], 1).is_err());
    }

    #[test]
    fn atoms_come_from_held_out_folds_only() {
        let data = small_data(60, 1);
        let fit = prepare_crossfit(&data, 3, &NuisanceSettings::default(), &settings(4, 2000), 5).unwrap();
        let sys = &fit.system;
        assert_eq!(sys.len(), 240);
        assert_eq!(sys.full_atom_count, 240);
        for a in &sys.atoms {
            assert!(!sys.nuisance_indices[a.fold].contains(&a.source_index));
            assert!(fit.partition.fold(a.fold).contains(&a.source_index));
            assert!(sys.measures[a.fold].contains(&a.z));
            assert!(a.target >= 0.0);
        }
        assert!(sys.gram.max_asymmetry() == 0.0);
        assert!(sys.gram.min_eigenvalue() > -1e-8);
    }

    #[test]
    fn split_uses_half_the_atoms_of_two_fold_crossfit() {
        let data = small_data(40, 2);
        let s = settings(3, 2000);
        let cf = prepare_crossfit(&data, 2, &NuisanceSettings::default(), &s, 1).unwrap();
        let sp = prepare_split(&data, &NuisanceSettings::default(), &s, 1).unwrap();
        assert_eq!(cf.system.len(), 2 * sp.system.len());
        for a in &sp.system.atoms {
            assert!(!sp.system.nuisance_indices[0].contains(&a.source_index));
        }
    }

    #[test]
    fn dictionary_cap_subsamples_deterministically() {
        let data = small_data(60, 3);
        let s = settings(5, 70);
        let a = prepare_crossfit(&data, 3, &NuisanceSettings::default(), &s, 11).unwrap().system;
        let b = prepare_crossfit(&data, 3, &NuisanceSettings::default(), &s, 11).unwrap().system;
        assert_eq!(a.len(), 70);
        assert_eq!(a.full_atom_count, 300);
        assert_eq!(a.atoms, b.atoms);
        assert_eq!(a.gram.entries(), b.gram.entries());
        assert!(!a.complete);
        // the objective keeps every held-out term even though the dictionary is capped
        assert_eq!(a.basis.len(), 60);
        assert_eq!(a.blocks.iter().map(CriterionBlock::len).sum::<usize>(), 300);
    }

    #[test]
    fn capped_fit_minimizes_the_full_objective() {
        let data = small_data(48, 12);
        let fit = prepare_crossfit(&data, 3, &NuisanceSettings::default(), &settings(4, 50), 6).unwrap();
        let sys = &fit.system;
        let lambda = 1e-3;
        let b = fit_bridge_crossfit(sys, lambda).unwrap();
        // explicit S over all 192 terms, row by row
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for blk in &sys.blocks {
            for (i, &c) in blk.contexts.iter().enumerate() {
                for m in 0..blk.draws.len() {
                    rows.push(
                        sys.atoms
                            .iter()
                            .map(|a| sys.context_gram[(c, a.context)] * sys.kernel_z.eval(blk.draws.row(m), &a.z))
                            .collect::<Vec<_>>(),
                    );
                    y.push(blk.targets[(i, m)]);
                }
            }
        }
        let n = rows.len();
        assert_eq!(n, 192);
        let s_mat = DMatrix::from_fn(n, sys.len(), |r, a| rows[r][a]);
        let y = DVector::from_column_slice(&y);
        let g = sys.gram.entries();
        let brute = |a: &DVector<f64>| (&s_mat * a - &y).norm_squared() / n as f64 + lambda * a.dot(&(g * a));
        let alpha = DVector::from_column_slice(&b.alpha);
        assert!((brute(&alpha) - sys.objective(&b.alpha, lambda)).abs() < 1e-12);
        // gradient descent on the explicit quadratic
        let h = s_mat.transpose() * &s_mat * (2.0 / n as f64) + g * (2.0 * lambda);
        let step = 1.0 / h.clone().symmetric_eigenvalues().max();
        let mut a = DVector::zeros(sys.len());
        for _ in 0..200_000 {
            let grad = &h * &a - s_mat.transpose() * &y * (2.0 / n as f64);
            a -= grad * step;
        }
        assert!(brute(&alpha) <= brute(&a) + 1e-12);
        assert!((brute(&alpha) - brute(&a)).abs() < 1e-8, "{} vs {}", brute(&alpha), brute(&a));
    }

    #[test]
    fn single_atom_fit_has_scalar_closed_form() {
        let data = small_data(30, 4);
        let (kw, kz) = shared_kernels(&data).unwrap();
        let train: Vec<usize> = (1..30).collect();
        let pair = NuisancePair::fit(&data, &train, kw, &NuisanceSettings::default(), 0).unwrap();
        let plan =
            FoldPlan { held_out: &[0], nuisance: &pair, measure: build_ref_measure(&data.z.select(&train)).unwrap() };
        let sys = assemble_system(&data, std::slice::from_ref(&plan), &settings(1, 10), kz, 3).unwrap();
        assert_eq!(sys.len(), 1);
        // ‖μ̂(c_0)‖² by the naive double sum
        let beta = pair.cme.weights(data.c.row(0)).unwrap();
        let wt = data.w.select(&train);
        let mut s = 0.0;
        for i in 0..train.len() {
            for j in 0..train.len() {
                s += beta[i] * beta[j] * kw.eval(wt.row(i), wt.row(j));
            }
        }
        assert!((sys.gram.entries()[(0, 0)] - s).abs() < 1e-10);
        let y = sys.targets[0];
        let mean = pair.density.mean(data.c.row(0)).unwrap();
        assert!((y - pair.density.density_at_mean(&mean, &sys.atoms[0].z)).abs() < 1e-15);
        let lambda = 0.3;
        let b = fit_bridge_crossfit(&sys, lambda).unwrap();
        assert!((b.alpha[0] - y / (s + lambda)).abs() < 1e-10);
        assert!((b.rkhs_norm_sq - b.alpha[0] * b.alpha[0] * s).abs() < 1e-12);
    }

    #[test]
    fn fitted_coefficients_minimize_the_objective() {
        let data = small_data(45, 5);
        let fit = prepare_crossfit(&data, 3, &NuisanceSettings::default(), &settings(3, 2000), 2).unwrap();
        let sys = &fit.system;
        let lambda = 1e-2;
        let b = fit_bridge_crossfit(sys, lambda).unwrap();
        let best = sys.objective(&b.alpha, lambda);
        let mut rng = rng_from_seed(77);
        for scale in [1e-3, 1e-1, 10.0] {
            let pert: Vec<f64> = b.alpha.iter().map(|a| a + scale * (rng.random::<f64>() - 0.5)).collect();
            assert!(sys.objective(&pert, lambda) >= best - 1e-14);
        }
        // independent route: gradient descent on the same quadratic
        let g = sys.gram.entries();
        let n = sys.len() as f64;
        let y = DVector::from_column_slice(&sys.targets);
        let mut a = DVector::zeros(sys.len());
        let top = g.clone().symmetric_eigenvalues().max();
        let step = 0.5 / (top * top / n + lambda * top);
        for _ in 0..20_000 {
            let ga = g * &a;
            let grad = g * (&ga - &y) * (2.0 / n) + &ga * (2.0 * lambda);
            a -= grad * step;
        }
        let gd = sys.objective(a.as_slice(), lambda);
        assert!(best <= gd + 1e-12);
        assert!((best - gd).abs() < 1e-6 * (1.0 + best.abs()), "{best} vs {gd}");
    }

    #[test]
    fn objective_through_bridge_values_matches_coefficient_form() {
        let data = small_data(36, 6);
        let fit = prepare_crossfit(&data, 3, &NuisanceSettings::default(), &settings(2, 2000), 8).unwrap();
        let b = fit_bridge_crossfit(&fit.system, 0.05).unwrap();
        let direct = fit.system.objective(&b.alpha, 0.05);
        let via = fit.system.objective_of(&b, 0.05).unwrap();
        assert!((direct - via).abs() < 1e-10 * (1.0 + direct));
    }

    #[test]
    fn conditional_expectation_reproduces_gram_rows() {
        let data = small_data(36, 7);
        let fit = prepare_crossfit(&data, 3, &NuisanceSettings::default(), &settings(2, 2000), 4).unwrap();
        let sys = &fit.system;
        let b = fit_bridge_crossfit(sys, 0.02).unwrap();
        let ga = sys.gram.entries() * DVector::from_column_slice(&b.alpha);
        for l in [0, 17, sys.len() - 1] {
            let atom = &sys.atoms[l];
            let cme = &fit.nuisances[atom.fold].cme;
            let v = bridge_cond_exp(&b, cme, data.c.row(atom.source_index), &atom.z).unwrap();
            assert!((v - ga[l]).abs() < 1e-9 * (1.0 + ga[l].abs()), "{v} vs {}", ga[l]);
        }
    }

    #[test]
    fn dense_and_sparse_kernel_projections_agree() {
        let mut rng = rng_from_seed(3);
        let pts =
            PointSet::from_rows(&(0..12).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect::<Vec<_>>())
                .unwrap();
        let kw = KernelSpec::gaussian(0.7).unwrap();
        let wide = EmbeddingBasis {
            kernel_w: kw,
            points: pts.clone(),
            supports: vec![(0..12).collect()],
            contexts: (0..3)
                .map(|c| ContextEmbedding {
                    fold: 0,
                    source_index: c,
                    support: 0,
                    weights: (0..12).map(|_| rng.random::<f64>() - 0.5).collect(),
                })
                .collect(),
        };
        let narrow = EmbeddingBasis {
            kernel_w: kw,
            points: pts.clone(),
            supports: (0..4).map(|c| vec![3 * c, 3 * c + 1, 3 * c + 2]).collect(),
            contexts: (0..4)
                .map(|c| ContextEmbedding { fold: 0, source_index: c, support: c, weights: vec![1.0 / 3.0; 3] })
                .collect(),
        };
        let k = gram_sym(&kw, &pts);
        let naive = |a: &EmbeddingBasis, b: &EmbeddingBasis| -> DMatrix<f64> {
            DMatrix::from_fn(a.len(), b.len(), |i, j| {
                let (ci, cj) = (&a.contexts[i], &b.contexts[j]);
                let mut s = 0.0;
                for (&p, wp) in a.supports[ci.support].iter().zip(&ci.weights) {
                    for (&q, wq) in b.supports[cj.support].iter().zip(&cj.weights) {
                        s += wp * wq * k.entries()[(p, q)];
                    }
                }
                s
            })
        };
        for (a, b) in [(&wide, &wide), (&wide, &narrow), (&narrow, &wide), (&narrow, &narrow)] {
            let got = a.cross_gram(b).unwrap();
            assert!((got - naive(a, b)).abs().max() < 1e-12);
        }
    }

    #[test]
    fn grid_contraction_matches_pointwise_evaluation() {
        let data = small_data(30, 8);
        let fit = prepare_crossfit(&data, 3, &NuisanceSettings::default(), &settings(2, 2000), 4).unwrap();
        let b = fit_bridge_crossfit(&fit.system, 0.02).unwrap();
        let w = data.w.row(3).to_vec();
        let grid = TensorGrid::over_box_with(&[-2.0, -1.0, 0.0, -1.0], &[2.0, 1.5, 1.0, 1.0], &[5, 4, 3, 2]).unwrap();
        let fast = b.eval_grid(&w, &grid);
        for (v, z) in fast.iter().zip(grid.points().iter()) {
            assert!((v - b.eval(&w, z)).abs() < 1e-12);
        }
        let ws = data.w.select(&[0, 1, 2]);
        let avg = b.eval_grid_averaged(&ws, &grid);
        for (v, z) in avg.iter().zip(grid.points().iter()) {
            let direct = ws.iter().map(|w| b.eval(w, z)).sum::<f64>() / 3.0;
            assert!((v - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_contraction_handles_odd_dimensions() {
        let basis = EmbeddingBasis {
            kernel_w: KernelSpec::gaussian(1.0).unwrap(),
            points: PointSet::from_rows(&[vec![0.0], vec![1.0]]).unwrap(),
            supports: vec![vec![0, 1]],
            contexts: vec![ContextEmbedding { fold: 0, source_index: 0, support: 0, weights: vec![0.5, 0.5] }],
        };
        for d in [1usize, 3] {
            let z = PointSet::from_rows(&[vec![0.1; d], vec![-0.4; d]]).unwrap();
            let b = BridgeEstimate::from_parts(
                basis.clone(),
                vec![0, 0],
                z,
                vec![1.0, -2.0],
                0.1,
                KernelSpec::gaussian(0.8).unwrap(),
            )
            .unwrap();
            let grid = TensorGrid::over_box(&vec![-1.0; d], &vec![1.0; d], 3).unwrap();
            let fast = b.eval_grid(&[0.3], &grid);
            for (v, z) in fast.iter().zip(grid.points().iter()) {
                assert!((v - b.eval(&[0.3], z)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn artifact_round_trip_preserves_evaluations() {
        let data = small_data(30, 9);
        let fit = prepare_crossfit(&data, 3, &NuisanceSettings::default(), &settings(2, 2000), 4).unwrap();
        let b = fit_bridge_crossfit(&fit.system, 0.02).unwrap();
        let json = serde_json::to_string(&b.to_artifact()).unwrap();
        let back = BridgeEstimate::from_artifact(serde_json::from_str(&json).unwrap()).unwrap();
        let (w, z) = (data.w.row(5), data.z.row(9));
        assert_eq!(b.eval(w, z), back.eval(w, z));
        let mut art = b.to_artifact();
        art.version = 99;
        assert!(BridgeEstimate::from_artifact(art).unwrap_err().is_config());
    }

    #[test]
    fn nonpositive_stage_two_ridge_is_a_config_error() {
        let data = small_data(30, 10);
        let fit = prepare_crossfit(&data, 3, &NuisanceSettings::default(), &settings(2, 2000), 4).unwrap();
        assert!(fit_bridge_crossfit(&fit.system, 0.0).unwrap_err().is_config());
        assert!(fit_bridge_crossfit(&fit.system, -1.0).unwrap_err().is_config());
    }

    #[test]
    fn exact_bridge_summary_recovers_interventional_mean() {
        let spec = FiniteLatentSpec::three_state(2);
        let model = FiniteLatentPomdp::new(spec.clone()).unwrap();
        let b = model.exact_bridge(CmrKind::Transition);
        let eps = sample_dataset(&model, 4000, 12);
        let m = PointSet::from_rows(&eps.iter().map(|e| e.m.clone()).collect::<Vec<_>>()).unwrap();
        let grid = TensorGrid::over_box(&[-4.5, -4.5], &[4.5, 4.5], 61).unwrap();
        for u in [0u8, 1] {
            let truth: f64 = (0..3)
                .map(|i| {
                    spec.initial[i]
                        * (0..3)
                            .map(|k| spec.transitions[usize::from(u)][i][k] * spec.emission_means[k][0])
                            .sum::<f64>()
                })
                .sum();
            let got = deconfounded_summary(&b, &m, u, &grid).unwrap();
            assert!((got - truth).abs() < 0.05, "u={u}: {got} vs {truth}");
        }
    }

    struct Zero;
    impl Bridge for Zero {
        fn w_dim(&self) -> usize {
            2
        }
        fn z_dim(&self) -> usize {
            2
        }
        fn eval(&self, _: &[f64], _: &[f64]) -> f64 {
            0.0
        }
    }

    #[test]
    fn summary_rejects_coarse_grids_and_empty_mass() {
        let m = PointSet::from_rows(&[vec![0.0]]).unwrap();
        let coarse = TensorGrid::over_box(&[0.0, 0.0], &[1.0, 1.0], 7).unwrap();
        assert!(deconfounded_summary(&Zero, &m, 0, &coarse).unwrap_err().is_config());
        let fine = TensorGrid::over_box(&[0.0, 0.0], &[1.0, 1.0], 8).unwrap();
        assert!(matches!(deconfounded_summary(&Zero, &m, 0, &fine), Err(Error::Degenerate(_))));
    }
}
