//! Vecchia-process engine: max-min ordering, nearest-neighbor conditioning
//! sets, exact grouping, the sparse inverse-Cholesky factor and
//! observation-first prediction.
//!
//! A plan depends only on locations and `m`, never on parameters, so it is
//! built once per year and cached. Grouping here is an exact regrouping of
//! the conditional terms (shared factorizations and joint evaluation of
//! nested chains), so grouped and ungrouped likelihoods agree to rounding;
//! it is a batching strategy, not a further approximation.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cyl_distance, normalize_lon, Location};
use crate::kernels::{covariance, ConvolutionMode, Site};
use crate::util::{pairwise_sum, sha256_hex, LN_2PI};

/// Covariance oracle over point indices.
pub trait CovSource: Sync {
    fn cov(&self, i: usize, j: usize) -> f64;
}

impl<F: Fn(usize, usize) -> f64 + Sync> CovSource for F {
    fn cov(&self, i: usize, j: usize) -> f64 {
        self(i, j)
    }
}

/// Observed-value covariance over one site list: the nugget sits on the
/// diagonal when enabled.
pub struct SiteCovariance<'a> {
    pub sites: &'a [Site],
    pub mode: ConvolutionMode,
    pub nugget: bool,
}

impl CovSource for SiteCovariance<'_> {
    fn cov(&self, i: usize, j: usize) -> f64 {
        if i == j {
            let kp = &self.sites[i].kp;
            kp.phi + if self.nugget { kp.sigma2 } else { 0.0 }
        } else {
            covariance(&self.sites[i], &self.sites[j], self.mode).expect("valid kernel parameters")
        }
    }
}

/// Covariance over observations followed by prediction points. Conditioning
/// observations carry their nugget (observed-value conditioning) while
/// predictions target the latent field, so prediction diagonals are
/// noise-free.
pub struct PredictionCovariance<'a> {
    pub obs: &'a [Site],
    pub pred: &'a [Site],
    pub mode: ConvolutionMode,
}

impl PredictionCovariance<'_> {
    fn site(&self, i: usize) -> &Site {
        if i < self.obs.len() {
            &self.obs[i]
        } else {
            &self.pred[i - self.obs.len()]
        }
    }
}

impl CovSource for PredictionCovariance<'_> {
    fn cov(&self, i: usize, j: usize) -> f64 {
        if i == j {
            let s = self.site(i);
            s.kp.phi + if i < self.obs.len() { s.kp.sigma2 } else { 0.0 }
        } else {
            covariance(self.site(i), self.site(j), self.mode).expect("valid kernel parameters")
        }
    }
}

/// How a group of consecutive ordered observations is evaluated without
/// changing the likelihood value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    /// All members share one conditioning set: one factorization, one
    /// solve per member.
    SharedSet,
    /// Each member conditions on the first member's set plus all earlier
    /// members: the terms are exactly the joint conditional, read off one
    /// factorization of the union.
    NestedChain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    /// Consecutive ordered positions.
    pub members: Vec<u32>,
    pub kind: GroupKind,
}

/// Ordering, conditioning sets and grouping for one set of locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VecchiaPlan {
    /// `order[k]` is the original index of the k-th ordered point.
    pub order: Vec<usize>,
    /// Per ordered position, the conditioning set as ordered positions,
    /// ascending; `cond_sets[0]` is empty and `|g(j)| <= m`.
    pub cond_sets: Vec<Vec<u32>>,
    pub groups: Vec<Group>,
    pub m: usize,
}

impl VecchiaPlan {
    /// Build the full plan: max-min order, m-nearest-neighbor conditioning
    /// sets, and (optionally) exact grouping.
    pub fn build(locs: &[Location], m: usize, grouping: bool) -> Result<Self> {
        if locs.is_empty() {
            return Err(Error::invalid("cannot build a plan over zero locations"));
        }
        if m == 0 {
            return Err(Error::invalid("conditioning size m must be at least 1"));
        }
        let order = maxmin_order(locs);
        let ordered: Vec<Location> = order.iter().map(|&i| locs[i]).collect();
        let cond_sets = nearest_neighbor_sets(&ordered, m);
        let groups = if grouping {
            group_conditioning_sets(&cond_sets)
        } else {
            singleton_groups(cond_sets.len())
        };
        Ok(Self { order, cond_sets, groups, m })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Largest conditioning-set size actually present.
    pub fn max_cond_len(&self) -> usize {
        self.cond_sets.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Max-min distance ordering. The first point is the one nearest the
/// centroid (arithmetic mean latitude, circular mean longitude); each
/// subsequent point maximizes its minimum distance to the points already
/// ordered. Ties break to the lowest input index.
pub fn maxmin_order(locs: &[Location]) -> Vec<usize> {
    let n = locs.len();
    if n == 0 {
        return Vec::new();
    }
    let mean_lat = locs.iter().map(|l| l.lat()).sum::<f64>() / n as f64;
    let (mut sin_sum, mut cos_sum) = (0.0, 0.0);
    for l in locs {
        sin_sum += l.lon().to_radians().sin();
        cos_sum += l.lon().to_radians().cos();
    }
    let mean_lon = if sin_sum == 0.0 && cos_sum == 0.0 {
        0.0
    } else {
        normalize_lon(sin_sum.atan2(cos_sum).to_degrees())
    };
    let centroid = Location::new(mean_lat.clamp(-90.0, 90.0), mean_lon).expect("finite centroid");

    let mut first = 0usize;
    let mut best = f64::INFINITY;
    for (i, l) in locs.iter().enumerate() {
        let d = cyl_distance(l, &centroid);
        if d < best {
            best = d;
            first = i;
        }
    }

    let mut order = Vec::with_capacity(n);
    let mut chosen = vec![false; n];
    let mut min_dist = vec![f64::INFINITY; n];
    order.push(first);
    chosen[first] = true;
    for i in 0..n {
        if !chosen[i] {
            min_dist[i] = cyl_distance(&locs[i], &locs[first]);
        }
    }
    while order.len() < n {
        let mut next = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            if !chosen[i] && min_dist[i] > best {
                best = min_dist[i];
                next = i;
            }
        }
        order.push(next);
        chosen[next] = true;
        for i in 0..n {
            if !chosen[i] {
                let d = cyl_distance(&locs[i], &locs[next]);
                if d < min_dist[i] {
                    min_dist[i] = d;
                }
            }
        }
    }
    order
}

/// Conditioning sets over an already-ordered point list: the `min(m, j)`
/// nearest earlier points, ties broken to the earlier ordered position.
/// Returned sets are ascending.
pub fn nearest_neighbor_sets(ordered: &[Location], m: usize) -> Vec<Vec<u32>> {
    let n = ordered.len();
    (0..n)
        .into_par_iter()
        .map(|j| {
            let keep = m.min(j);
            if keep == 0 {
                return Vec::new();
            }
            let mut cand: Vec<(f64, u32)> =
                (0..j).map(|k| (cyl_distance(&ordered[j], &ordered[k]), k as u32)).collect();
            cand.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distance").then(a.1.cmp(&b.1)));
            let mut set: Vec<u32> = cand[..keep].iter().map(|c| c.1).collect();
            set.sort_unstable();
            set
        })
        .collect()
}

fn singleton_groups(n: usize) -> Vec<Group> {
    (0..n as u32).map(|j| Group { members: vec![j], kind: GroupKind::SharedSet }).collect()
}

/// Union size of the would-be group, under its kind.
fn union_len(base_len: usize, members: usize, kind: GroupKind) -> usize {
    match kind {
        GroupKind::SharedSet => base_len,
        GroupKind::NestedChain => base_len + members.saturating_sub(1),
    }
}

/// Flop-count proxy: grouping the candidates must not cost more than the
/// per-observation factorizations it replaces.
fn merge_is_cheaper(union: usize, members: usize, individual: &[usize]) -> bool {
    let grouped = union.pow(3) + union * members;
    let separate: usize = individual.iter().map(|&g| (g + 1).pow(3)).sum();
    grouped <= separate
}

/// Greedy single pass merging consecutive observations into groups that can
/// be evaluated exactly from one factorization: runs of identical
/// conditioning sets, or nested chains where each set equals the previous
/// one plus the previous observation. A merge also has to pass the cost
/// criterion above.
pub fn group_conditioning_sets(cond_sets: &[Vec<u32>]) -> Vec<Group> {
    let mut groups: Vec<Group> = Vec::new();
    let mut start = 0usize;
    while start < cond_sets.len() {
        let base = &cond_sets[start];
        let mut members: Vec<u32> = vec![start as u32];
        let mut kind: Option<GroupKind> = None;
        let mut sizes = vec![base.len()];
        let mut j = start + 1;
        while j < cond_sets.len() {
            let set = &cond_sets[j];
            let shared_ok =
                kind.unwrap_or(GroupKind::SharedSet) == GroupKind::SharedSet && set == base;
            let nested_ok = kind.unwrap_or(GroupKind::NestedChain) == GroupKind::NestedChain
                && is_nested_extension(base, &members, set);
            let candidate_kind = if shared_ok {
                Some(GroupKind::SharedSet)
            } else if nested_ok {
                Some(GroupKind::NestedChain)
            } else {
                None
            };
            let Some(k) = candidate_kind else { break };
            let mut trial_sizes = sizes.clone();
            trial_sizes.push(set.len());
            let trial_union = union_len(base.len(), members.len() + 1, k);
            if !merge_is_cheaper(trial_union, members.len() + 1, &trial_sizes) {
                break;
            }
            members.push(j as u32);
            sizes = trial_sizes;
            kind = Some(k);
            j += 1;
        }
        groups.push(Group { members, kind: kind.unwrap_or(GroupKind::SharedSet) });
        start = j;
    }
    groups
}

/// Does `set` equal `base` followed by the members so far? (Both are
/// ascending and every member position exceeds every base entry.)
fn is_nested_extension(base: &[u32], members: &[u32], set: &[u32]) -> bool {
    if set.len() != base.len() + members.len() {
        return false;
    }
    set[..base.len()] == *base && set[base.len()..] == *members
}

/// Vecchia log-likelihood: the sum of conditional Gaussian log-densities
/// over the plan's groups. `values` and `means` are indexed like the
/// locations the plan was built from. Group terms are evaluated in
/// parallel and reduced pairwise in group order, so the result is
/// bit-stable for any thread count.
pub fn vecchia_loglik(
    values: &DVector<f64>,
    means: &DVector<f64>,
    plan: &VecchiaPlan,
    cov: &dyn CovSource,
) -> Result<f64> {
    let n = plan.len();
    if values.len() != n || means.len() != n {
        return Err(Error::invalid(format!(
            "plan covers {n} points but got {} values / {} means",
            values.len(),
            means.len()
        )));
    }
    let residual: Vec<f64> =
        (0..n).map(|k| values[plan.order[k]] - means[plan.order[k]]).collect();
    let terms: Vec<Result<f64>> = plan
        .groups
        .par_iter()
        .map(|group| group_loglik(group, plan, cov, &residual))
        .collect();
    let mut vals = Vec::with_capacity(terms.len());
    for t in terms {
        vals.push(t?);
    }
    Ok(pairwise_sum(&vals))
}

fn cov_at(cov: &dyn CovSource, plan: &VecchiaPlan, a: u32, b: u32) -> f64 {
    cov.cov(plan.order[a as usize], plan.order[b as usize])
}

fn group_loglik(
    group: &Group,
    plan: &VecchiaPlan,
    cov: &dyn CovSource,
    residual: &[f64],
) -> Result<f64> {
    match group.kind {
        GroupKind::SharedSet => {
            let base = &plan.cond_sets[group.members[0] as usize];
            let q = base.len();
            let mut term = 0.0;
            if q == 0 {
                for &j in &group.members {
                    let d = cov_at(cov, plan, j, j);
                    if !(d > 0.0) {
                        return Err(Error::numeric(format!(
                            "nonpositive marginal variance at ordered index {j}"
                        )));
                    }
                    let r = residual[j as usize];
                    term += -0.5 * (LN_2PI + d.ln()) - 0.5 * r * r / d;
                }
                return Ok(term);
            }
            let mut sigma = DMatrix::zeros(q, q);
            for (a, &ia) in base.iter().enumerate() {
                for (b, &ib) in base.iter().enumerate() {
                    sigma[(a, b)] = cov_at(cov, plan, ia, ib);
                }
            }
            let chol = Cholesky::new(sigma).ok_or_else(|| {
                Error::numeric(format!(
                    "conditioning covariance singular at ordered index {}",
                    group.members[0]
                ))
            })?;
            let r_base = DVector::from_fn(q, |a, _| residual[base[a] as usize]);
            for &j in &group.members {
                let k_gj = DVector::from_fn(q, |a, _| cov_at(cov, plan, base[a], j));
                let b = chol.solve(&k_gj);
                let d = cov_at(cov, plan, j, j) - k_gj.dot(&b);
                if !(d > 0.0) {
                    return Err(Error::numeric(format!(
                        "nonpositive conditional variance at ordered index {j}"
                    )));
                }
                let r = residual[j as usize] - b.dot(&r_base);
                term += -0.5 * (LN_2PI + d.ln()) - 0.5 * r * r / d;
            }
            Ok(term)
        }
        GroupKind::NestedChain => {
            let base = &plan.cond_sets[group.members[0] as usize];
            let ext: Vec<u32> =
                base.iter().copied().chain(group.members.iter().copied()).collect();
            let e = ext.len();
            let mut sigma = DMatrix::zeros(e, e);
            for a in 0..e {
                for b in 0..e {
                    sigma[(a, b)] = cov_at(cov, plan, ext[a], ext[b]);
                }
            }
            let chol = Cholesky::new(sigma).ok_or_else(|| {
                Error::numeric(format!(
                    "joint covariance singular in group starting at ordered index {}",
                    group.members[0]
                ))
            })?;
            let l = chol.l_dirty();
            let r_ext = DVector::from_fn(e, |a, _| residual[ext[a] as usize]);
            let z = l
                .solve_lower_triangular(&r_ext)
                .ok_or_else(|| Error::numeric("singular triangular factor"))?;
            let mut term = 0.0;
            for p in base.len()..e {
                term += -0.5 * LN_2PI - l[(p, p)].ln() - 0.5 * z[p] * z[p];
            }
            Ok(term)
        }
    }
}

// ---------------------------------------------------------------------------
// Sparse inverse-Cholesky factor
// ---------------------------------------------------------------------------

/// One column of the factor: the diagonal plus off-diagonal entries at the
/// conditioning rows.
#[derive(Debug, Clone)]
pub struct FactorColumn {
    pub diag: f64,
    pub rows: Vec<u32>,
    pub vals: Vec<f64>,
}

/// Column-sparse upper-triangular factor `U` in the plan's ordered space,
/// with `U U^T` equal to the Vecchia-implied precision. `order[k]` maps the
/// ordered row/column `k` back to the original point index.
#[derive(Debug, Clone)]
pub struct SparseFactor {
    pub order: Vec<usize>,
    pub cols: Vec<FactorColumn>,
}

impl SparseFactor {
    pub fn len(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.cols.iter().map(|c| c.rows.len() + 1).sum()
    }

    /// `U^T v` for an ordered-space vector.
    pub fn ut_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.len(), |j, _| {
            let col = &self.cols[j];
            let mut acc = col.diag * v[j];
            for (r, val) in col.rows.iter().zip(&col.vals) {
                acc += val * v[*r as usize];
            }
            acc
        })
    }

    /// `U v` for an ordered-space vector.
    pub fn u_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        for (j, col) in self.cols.iter().enumerate() {
            out[j] += col.diag * v[j];
            for (r, val) in col.rows.iter().zip(&col.vals) {
                out[*r as usize] += val * v[j];
            }
        }
        out
    }

    /// Solve `U x = b` (back substitution on columns).
    pub fn solve_upper(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.len();
        let mut x = b.clone();
        for j in (0..n).rev() {
            let col = &self.cols[j];
            if col.diag == 0.0 {
                return Err(Error::numeric("zero diagonal in sparse factor"));
            }
            x[j] /= col.diag;
            let xj = x[j];
            for (r, val) in col.rows.iter().zip(&col.vals) {
                x[*r as usize] -= val * xj;
            }
        }
        Ok(x)
    }

    /// Solve `U^T x = b` (forward substitution).
    pub fn solve_upper_transpose(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.len();
        let mut x = DVector::zeros(n);
        for j in 0..n {
            let col = &self.cols[j];
            if col.diag == 0.0 {
                return Err(Error::numeric("zero diagonal in sparse factor"));
            }
            let mut acc = b[j];
            for (r, val) in col.rows.iter().zip(&col.vals) {
                acc -= val * x[*r as usize];
            }
            x[j] = acc / col.diag;
        }
        Ok(x)
    }

    /// Log-likelihood through the factor:
    /// `-0.5 ||U^T r||^2 + sum_j log U_jj - (n/2) log 2 pi`
    /// with `r` the residual in original indexing.
    pub fn loglik(&self, values: &DVector<f64>, means: &DVector<f64>) -> Result<f64> {
        let n = self.len();
        if values.len() != n || means.len() != n {
            return Err(Error::invalid("factor dimension mismatch"));
        }
        let r = DVector::from_fn(n, |k, _| values[self.order[k]] - means[self.order[k]]);
        let q = self.ut_mul(&r);
        let log_diag: f64 = self.cols.iter().map(|c| c.diag.ln()).sum();
        Ok(-0.5 * q.norm_squared() + log_diag - 0.5 * n as f64 * LN_2PI)
    }

    /// `U^T P M` where `P` permutes original-index rows of the dense matrix
    /// `M` into ordered space. Used to push design matrices through the
    /// implied precision.
    pub fn ut_mul_dense_original(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.len();
        assert_eq!(m.nrows(), n, "row count must match factor dimension");
        let k = m.ncols();
        let mut out = DMatrix::zeros(n, k);
        for j in 0..n {
            let col = &self.cols[j];
            for c in 0..k {
                let mut acc = col.diag * m[(self.order[j], c)];
                for (r, val) in col.rows.iter().zip(&col.vals) {
                    acc += val * m[(self.order[*r as usize], c)];
                }
                out[(j, c)] = acc;
            }
        }
        out
    }
}

/// Build the sparse inverse-Cholesky factor for a plan: per ordered column,
/// the regression of the point on its conditioning set.
pub fn build_factor(plan: &VecchiaPlan, cov: &dyn CovSource) -> Result<SparseFactor> {
    let n = plan.len();
    let cols: Vec<Result<FactorColumn>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let set = &plan.cond_sets[j];
            let q = set.len();
            let jj = cov_at(cov, plan, j as u32, j as u32);
            if q == 0 {
                if !(jj > 0.0) {
                    return Err(Error::numeric(format!(
                        "nonpositive marginal variance at ordered index {j}"
                    )));
                }
                return Ok(FactorColumn {
                    diag: 1.0 / jj.sqrt(),
                    rows: Vec::new(),
                    vals: Vec::new(),
                });
            }
            let mut sigma = DMatrix::zeros(q, q);
            for a in 0..q {
                for b in 0..q {
                    sigma[(a, b)] = cov_at(cov, plan, set[a], set[b]);
                }
            }
            let k_gj = DVector::from_fn(q, |a, _| cov_at(cov, plan, set[a], j as u32));
            let chol = Cholesky::new(sigma).ok_or_else(|| {
                Error::numeric(format!("conditioning covariance singular at ordered index {j}"))
            })?;
            let b = chol.solve(&k_gj);
            let d = jj - k_gj.dot(&b);
            // Exact interpolation (a point duplicating its conditioning set
            // with zero nugget) drives d to zero up to rounding; keep the
            // column finite by flooring it. A strongly negative d is a real
            // inconsistency.
            let floor = jj * 1e-14;
            let d = if d > floor {
                d
            } else if d > -1e-10 * jj {
                floor
            } else {
                return Err(Error::numeric(format!(
                    "nonpositive conditional variance at ordered index {j}"
                )));
            };
            let inv_sd = 1.0 / d.sqrt();
            Ok(FactorColumn {
                diag: inv_sd,
                rows: set.clone(),
                vals: b.iter().map(|v| -v * inv_sd).collect(),
            })
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for c in cols {
        out.push(c?);
    }
    Ok(SparseFactor { order: plan.order.clone(), cols: out })
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// Observation-first extension of a plan: predictions are max-min ordered
/// among themselves, appended after the observations, and condition on the
/// m nearest among all observations plus earlier predictions. Observation
/// conditioning sets are untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionExtension {
    pub plan: VecchiaPlan,
    pub n_obs: usize,
}

pub fn extend_for_prediction(
    obs_plan: &VecchiaPlan,
    obs_locs: &[Location],
    pred_locs: &[Location],
    m: usize,
    grouping: bool,
) -> Result<PredictionExtension> {
    let n = obs_locs.len();
    if obs_plan.len() != n {
        return Err(Error::invalid("observation plan does not match locations"));
    }
    if pred_locs.is_empty() {
        return Ok(PredictionExtension { plan: obs_plan.clone(), n_obs: n });
    }
    let pred_order = maxmin_order(pred_locs);
    let mut order = obs_plan.order.clone();
    order.extend(pred_order.iter().map(|&k| n + k));

    let ordered_obs: Vec<Location> = obs_plan.order.iter().map(|&i| obs_locs[i]).collect();
    let ordered_pred: Vec<Location> = pred_order.iter().map(|&k| pred_locs[k]).collect();

    let mut cond_sets = obs_plan.cond_sets.clone();
    let pred_sets: Vec<Vec<u32>> = (0..ordered_pred.len())
        .into_par_iter()
        .map(|t| {
            let target = &ordered_pred[t];
            let keep = m.min(n + t);
            let mut cand: Vec<(f64, u32)> = (0..n + t)
                .map(|k| {
                    let loc = if k < n { &ordered_obs[k] } else { &ordered_pred[k - n] };
                    (cyl_distance(target, loc), k as u32)
                })
                .collect();
            cand.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distance").then(a.1.cmp(&b.1)));
            let mut set: Vec<u32> = cand[..keep].iter().map(|c| c.1).collect();
            set.sort_unstable();
            set
        })
        .collect();
    cond_sets.extend(pred_sets);

    let groups = if grouping {
        group_conditioning_sets(&cond_sets)
    } else {
        singleton_groups(cond_sets.len())
    };
    Ok(PredictionExtension {
        plan: VecchiaPlan { order, cond_sets, groups, m: obs_plan.m.max(m) },
        n_obs: n,
    })
}

/// Posterior of the latent field at the prediction points given the
/// observations, held in sparse form: the mean plus the prediction block
/// `U_pp` whose inverse Gram matrix is the posterior covariance.
pub struct VecchiaPrediction {
    /// Posterior mean in the original prediction indexing.
    pub mean: DVector<f64>,
    /// Ordered-space prediction block of the factor.
    upp: SparseFactor,
    /// `pred_order[k]` is the original prediction index of ordered row k.
    pred_order: Vec<usize>,
}

impl VecchiaPrediction {
    /// Marginal posterior standard deviations (one triangular solve per
    /// prediction point).
    pub fn marginal_sd(&self) -> Result<DVector<f64>> {
        let p = self.upp.len();
        let mut out = DVector::zeros(p);
        for k in 0..p {
            let mut e = DVector::zeros(p);
            e[k] = 1.0;
            let x = self.upp.solve_upper(&e)?;
            out[self.pred_order[k]] = x.norm();
        }
        Ok(out)
    }

    /// Quadratic form `a^T W^{-1} a` for weights in original prediction
    /// indexing; one triangular solve.
    pub fn quadratic_variance(&self, weights: &DVector<f64>) -> Result<f64> {
        let p = self.upp.len();
        if weights.len() != p {
            return Err(Error::invalid("weight length mismatch"));
        }
        let w_ord = DVector::from_fn(p, |k, _| weights[self.pred_order[k]]);
        Ok(self.upp.solve_upper(&w_ord)?.norm_squared())
    }

    /// Draw from the posterior (original prediction indexing).
    pub fn sample(&self, rng: &mut impl rand::Rng) -> Result<DVector<f64>> {
        let p = self.upp.len();
        let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let y = self.upp.solve_upper_transpose(&z)?;
        let mut out = self.mean.clone();
        for k in 0..p {
            out[self.pred_order[k]] += y[k];
        }
        Ok(out)
    }
}

/// Kriging through the extended factor. Means are handled by conditioning
/// on residuals and adding the prediction means back.
pub fn vecchia_predict(
    ext: &PredictionExtension,
    obs_values: &DVector<f64>,
    obs_means: &DVector<f64>,
    pred_means: &DVector<f64>,
    cov: &dyn CovSource,
) -> Result<VecchiaPrediction> {
    let n = ext.n_obs;
    let p = ext.plan.len() - n;
    if obs_values.len() != n || obs_means.len() != n || pred_means.len() != p {
        return Err(Error::invalid("prediction dimension mismatch"));
    }
    let factor = build_factor(&ext.plan, cov)?;

    // Ordered observation residual.
    let r = DVector::from_fn(n, |k, _| {
        obs_values[ext.plan.order[k]] - obs_means[ext.plan.order[k]]
    });

    // Split prediction columns into the obs-row and pred-row parts.
    let mut upp_cols = Vec::with_capacity(p);
    let mut t = DVector::zeros(p);
    for c in 0..p {
        let col = &factor.cols[n + c];
        let mut rows = Vec::new();
        let mut vals = Vec::new();
        let mut acc = 0.0;
        for (row, val) in col.rows.iter().zip(&col.vals) {
            if (*row as usize) < n {
                acc += val * r[*row as usize];
            } else {
                rows.push(row - n as u32);
                vals.push(*val);
            }
        }
        t[c] = acc;
        upp_cols.push(FactorColumn { diag: col.diag, rows, vals });
    }
    let pred_order: Vec<usize> = ext.plan.order[n..].iter().map(|&i| i - n).collect();
    let upp = SparseFactor { order: (0..p).collect(), cols: upp_cols };

    // mean = mu_p - U_pp^{-T} (U_op^T r), mapped back to original indexing.
    let z = upp.solve_upper_transpose(&t)?;
    let mut mean = pred_means.clone();
    for k in 0..p {
        mean[pred_order[k]] -= z[k];
    }
    Ok(VecchiaPrediction { mean, upp, pred_order })
}

// ---------------------------------------------------------------------------
// Plan sidecar files
// ---------------------------------------------------------------------------

const PLAN_FORMAT: &str = "cylgp-plan-v1";

#[derive(Serialize, Deserialize)]
struct PlanFile {
    format: String,
    key: String,
    plan: VecchiaPlan,
}

/// Content key for a plan: locations, m and the ordering version. Re-runs
/// with the same inputs can skip reconstruction.
pub fn plan_cache_key(locs: &[Location], m: usize, grouping: bool) -> String {
    let mut bytes = Vec::with_capacity(16 * locs.len() + 16);
    bytes.extend_from_slice(PLAN_FORMAT.as_bytes());
    bytes.extend_from_slice(&(m as u64).to_le_bytes());
    bytes.push(u8::from(grouping));
    for l in locs {
        bytes.extend_from_slice(&l.lat().to_bits().to_le_bytes());
        bytes.extend_from_slice(&l.lon().to_bits().to_le_bytes());
    }
    sha256_hex(&bytes)
}

pub fn save_plan(plan: &VecchiaPlan, key: &str, path: &Path) -> Result<()> {
    let file =
        PlanFile { format: PLAN_FORMAT.to_string(), key: key.to_string(), plan: plan.clone() };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Load a cached plan; `None` when the file is absent or keyed differently.
pub fn load_plan(key: &str, path: &Path) -> Result<Option<VecchiaPlan>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    let file: PlanFile = serde_json::from_str(&text)?;
    if file.format != PLAN_FORMAT || file.key != key {
        return Ok(None);
    }
    Ok(Some(file.plan))
}

/// Build a plan, consulting a cache directory when given.
pub fn plan_with_cache(
    locs: &[Location],
    m: usize,
    grouping: bool,
    cache_dir: Option<&Path>,
) -> Result<VecchiaPlan> {
    let key = plan_cache_key(locs, m, grouping);
    let path = cache_dir.map(|d| d.join(format!("{key}.plan.json")));
    if let Some(p) = &path {
        if let Some(plan) = load_plan(&key, p)? {
            return Ok(plan);
        }
    }
    let plan = VecchiaPlan::build(locs, m, grouping)?;
    if let Some(p) = &path {
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        save_plan(&plan, &key, p)?;
    }
    Ok(plan)
}
