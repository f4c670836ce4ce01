//! Least-squares regression estimators for conditional expectations.
//!
//! The backward solvers replace exact conditional expectations with ridge
//! least squares on polynomial features of the conditioning variables at
//! each node (current state, current Brownian value and, for random
//! delays, the realized delayed time). Features are centered and scaled
//! internally, which keeps the normal equations well conditioned and makes
//! fitted values invariant under affine rescaling of the inputs.

use crate::delay::DelayMap;
use crate::ensemble::{block_accumulate, PathArray};
use crate::error::{Result, SmpError};
use std::collections::HashSet;

/// Polynomial feature basis for the conditional-expectation regressions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionBasis {
    /// Total degree of the monomials.
    pub degree: usize,
    /// Ridge penalty added to the standardized Gram matrix. Zero keeps the
    /// fit an exact least squares; rank-deficient designs are handled by
    /// dropping numerically dependent columns during factorization.
    pub ridge: f64,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            degree: 2,
            ridge: 0.0,
        }
    }
}

impl RegressionBasis {
    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 || self.degree > 6 {
            return Err(SmpError::Config(format!(
                "basis degree must lie in 1..=6, got {}",
                self.degree
            )));
        }
        if !(self.ridge >= 0.0) {
            return Err(SmpError::Config(format!(
                "ridge must be nonnegative, got {}",
                self.ridge
            )));
        }
        Ok(())
    }
}

/// Number of nonconstant monomials in `n_vars` variables of total degree
/// `<= degree` (the constant term is handled by centering).
pub fn n_monomials(n_vars: usize, degree: usize) -> usize {
    // C(n_vars + degree, degree) - 1
    let mut num = 1usize;
    for i in 1..=degree {
        num = num * (n_vars + i) / i;
    }
    num - 1
}

/// Expands raw variables into all monomials of total degree 1..=degree,
/// in a fixed deterministic order.
pub fn expand_monomials(vars: &[f64], degree: usize, out: &mut Vec<f64>) {
    out.clear();
    // degree-1 block, then recursively multiply
    let m = vars.len();
    out.extend_from_slice(vars);
    let mut block_start = 0usize;
    let mut start_of_var = vec![0usize; m];
    for d in 2..=degree {
        let block_end = out.len();
        let mut new_start_of_var = vec![0usize; m];
        for (vi, &v) in vars.iter().enumerate() {
            new_start_of_var[vi] = out.len();
            // multiply v with every monomial of degree d-1 that starts at
            // or after var vi (avoids duplicates)
            let from = if d == 2 {
                block_start + vi
            } else {
                start_of_var[vi]
            };
            for k in from..block_end {
                let prod = v * out[k];
                out.push(prod);
            }
        }
        start_of_var = new_start_of_var;
        block_start = block_end;
    }
}

/// A fitted regression, usable as a per-sample evaluator.
#[derive(Debug, Clone)]
pub struct FittedRegression {
    degree: usize,
    n_vars: usize,
    target_mean: f64,
    col_mean: Vec<f64>,
    col_scale: Vec<f64>, // 0 marks a dropped (constant) column
    coefs: Vec<f64>,
}

impl FittedRegression {
    /// Evaluates the fitted function at a raw variable vector.
    pub fn eval(&self, vars: &[f64]) -> f64 {
        assert_eq!(vars.len(), self.n_vars);
        let mut feats = Vec::with_capacity(self.coefs.len());
        expand_monomials(vars, self.degree, &mut feats);
        let mut acc = self.target_mean;
        for (j, &f) in feats.iter().enumerate() {
            if self.col_scale[j] > 0.0 {
                acc += self.coefs[j] * (f - self.col_mean[j]) / self.col_scale[j];
            }
        }
        acc
    }
}

/// Workspace for repeated per-node regressions; reuses buffers across
/// nodes and shares one Gram factorization across sequential targets.
pub struct StepRegressor {
    basis: RegressionBasis,
    expanded: Vec<f64>,
    fact: Option<Factorized>,
}

struct Factorized {
    n: usize,
    k: usize,
    col_mean: Vec<f64>,
    col_scale: Vec<f64>,
    chol: Vec<f64>,
    active: Vec<bool>,
}

impl StepRegressor {
    pub fn new(basis: RegressionBasis) -> Self {
        Self {
            basis,
            expanded: Vec::new(),
            fact: None,
        }
    }

    /// Fits one regression per target on shared features (row-major
    /// `n_samples x n_vars`) and returns the fitted values at the samples.
    pub fn fit_values(
        &mut self,
        raw: &[f64],
        n_samples: usize,
        n_vars: usize,
        targets: &[&[f64]],
    ) -> Result<Vec<Vec<f64>>> {
        self.prepare(raw, n_samples, n_vars)?;
        targets.iter().map(|t| self.fitted(t)).collect()
    }

    /// Fitted values at the samples for one target, using the prepared
    /// factorization.
    pub fn fitted(&mut self, target: &[f64]) -> Result<Vec<f64>> {
        let fact = self
            .fact
            .as_ref()
            .ok_or_else(|| SmpError::Estimation("regressor not prepared".into()))?;
        assert_eq!(target.len(), fact.n);
        let (mean, coefs) = solve_target(fact, &self.expanded, target);
        let k = fact.k;
        let expanded = &self.expanded;
        let fitted: Vec<f64> = (0..fact.n)
            .map(|i| {
                let row = &expanded[i * k..(i + 1) * k];
                let mut acc = mean;
                for j in 0..k {
                    if fact.col_scale[j] > 0.0 {
                        acc += coefs[j] * (row[j] - fact.col_mean[j]) / fact.col_scale[j];
                    }
                }
                acc
            })
            .collect();
        Ok(fitted)
    }

    /// Fits one regression and returns the evaluator.
    pub fn fit_function(
        &mut self,
        raw: &[f64],
        n_samples: usize,
        n_vars: usize,
        target: &[f64],
    ) -> Result<FittedRegression> {
        self.prepare(raw, n_samples, n_vars)?;
        let fact = self.fact.as_ref().unwrap();
        let (mean, coefs) = solve_target(fact, &self.expanded, target);
        Ok(FittedRegression {
            degree: self.basis.degree,
            n_vars,
            target_mean: mean,
            col_mean: fact.col_mean.clone(),
            col_scale: fact.col_scale.clone(),
            coefs,
        })
    }

    /// Expands features and factorizes the standardized Gram matrix.
    pub fn prepare(&mut self, raw: &[f64], n_samples: usize, n_vars: usize) -> Result<()> {
        self.basis.validate()?;
        assert_eq!(raw.len(), n_samples * n_vars);
        let k = n_monomials(n_vars, self.basis.degree);

        // expand features once
        self.expanded.clear();
        self.expanded.reserve(n_samples * k);
        let mut feats = Vec::with_capacity(k);
        for i in 0..n_samples {
            expand_monomials(&raw[i * n_vars..(i + 1) * n_vars], self.basis.degree, &mut feats);
            self.expanded.extend_from_slice(&feats);
        }

        // one deterministic pass: column sums and raw Gram (lower triangle)
        let tri = k * (k + 1) / 2;
        let expanded = &self.expanded;
        let sums = block_accumulate(n_samples, k + tri, &|i, acc: &mut [f64]| {
            let row = &expanded[i * k..(i + 1) * k];
            for (j, &f) in row.iter().enumerate() {
                acc[j] += f;
            }
            let mut idx = k;
            for a in 0..k {
                for b in 0..=a {
                    acc[idx] += row[a] * row[b];
                    idx += 1;
                }
            }
        });
        let nn = n_samples as f64;
        let col_mean: Vec<f64> = sums[..k].iter().map(|s| s / nn).collect();
        // centered Gram
        let mut gram = vec![0.0f64; tri];
        {
            let mut idx = 0;
            for a in 0..k {
                for b in 0..=a {
                    gram[idx] = sums[k + idx] - nn * col_mean[a] * col_mean[b];
                    idx += 1;
                }
            }
        }
        let diag_at = |j: usize| j * (j + 1) / 2 + j;
        let col_scale: Vec<f64> = (0..k)
            .map(|j| {
                let var = gram[diag_at(j)] / nn;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    0.0 // constant column: dropped
                }
            })
            .collect();

        // the samples must carry at least as much information as the
        // active basis (constant columns reduce to the intercept, which
        // any sample determines); a design with varying columns but fewer
        // distinct samples than active functions is underdetermined
        let active = col_scale.iter().filter(|s| **s > 0.0).count();
        if active > 0 {
            let distinct = count_distinct_rows(raw, n_samples, n_vars, active + 1);
            if distinct < active + 1 {
                return Err(SmpError::Estimation(format!(
                    "{distinct} distinct samples for {} active basis functions",
                    active + 1
                )));
            }
        }

        // standardized Gram; dropped columns become identity rows
        let mut std_gram = vec![0.0f64; tri];
        {
            let mut idx = 0;
            for a in 0..k {
                for b in 0..=a {
                    std_gram[idx] = if col_scale[a] > 0.0 && col_scale[b] > 0.0 {
                        gram[idx] / (col_scale[a] * col_scale[b])
                    } else if a == b {
                        nn
                    } else {
                        0.0
                    };
                    idx += 1;
                }
            }
        }

        // pivot-skip Cholesky: columns whose remaining variance falls
        // below a relative floor are dropped deterministically (their
        // coefficient is zero), so rank-deficient designs never fail and
        // never amplify round-off
        let mut chol = std_gram;
        if self.basis.ridge > 0.0 {
            for j in 0..k {
                chol[diag_at(j)] += self.basis.ridge;
            }
        }
        let active = cholesky_pivot_skip(&mut chol, k)
            .ok_or_else(|| SmpError::Estimation("non-finite Gram matrix".into()))?;

        self.fact = Some(Factorized {
            n: n_samples,
            k,
            col_mean,
            col_scale,
            chol,
            active,
        });
        Ok(())
    }
}

fn solve_target(fact: &Factorized, expanded: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let k = fact.k;
    let n = fact.n;
    let sums = block_accumulate(n, k + 1, &|i, acc: &mut [f64]| {
        let y = target[i];
        acc[k] += y;
        let row = &expanded[i * k..(i + 1) * k];
        for (j, &f) in row.iter().enumerate() {
            acc[j] += f * y;
        }
    });
    let nn = n as f64;
    let target_mean = sums[k] / nn;
    let mut rhs: Vec<f64> = (0..k)
        .map(|j| {
            if fact.col_scale[j] > 0.0 {
                (sums[j] - nn * fact.col_mean[j] * target_mean) / fact.col_scale[j]
            } else {
                0.0
            }
        })
        .collect();
    cholesky_solve(&fact.chol, k, &fact.active, &mut rhs);
    (target_mean, rhs)
}

/// Fits `E[target | features]` by ridge least squares on polynomial
/// features of the raw conditioning variables (row-major
/// `n_samples x n_vars`).
pub fn regress_conditional(
    features: &[f64],
    n_samples: usize,
    n_vars: usize,
    targets: &[f64],
    basis: &RegressionBasis,
) -> Result<FittedRegression> {
    if n_samples == 0 || n_vars == 0 {
        return Err(SmpError::Estimation("empty design".into()));
    }
    if targets.len() != n_samples {
        return Err(SmpError::Estimation(format!(
            "{} targets for {} samples",
            targets.len(),
            n_samples
        )));
    }
    StepRegressor::new(*basis).fit_function(features, n_samples, n_vars, targets)
}

fn count_distinct_rows(raw: &[f64], n_samples: usize, n_vars: usize, needed: usize) -> usize {
    let mut seen: HashSet<Vec<u64>> = HashSet::with_capacity(needed * 2);
    for i in 0..n_samples {
        let key: Vec<u64> = raw[i * n_vars..(i + 1) * n_vars]
            .iter()
            .map(|v| v.to_bits())
            .collect();
        seen.insert(key);
        if seen.len() >= needed {
            return seen.len();
        }
    }
    seen.len()
}

/// Relative floor under which a pivot marks its column as numerically
/// dependent on the earlier ones.
const PIVOT_DROP_TOL: f64 = 1e-10;

/// In-place Cholesky of a symmetric matrix stored as a packed lower
/// triangle. Columns whose pivot falls below `PIVOT_DROP_TOL` times the
/// original diagonal are dropped (their row is zeroed and the diagonal set
/// to 1), which keeps the factorization total on rank-deficient input.
/// Returns the active-column mask, or `None` on non-finite input.
fn cholesky_pivot_skip(m: &mut [f64], k: usize) -> Option<Vec<bool>> {
    let at = |r: usize, c: usize| r * (r + 1) / 2 + c;
    let mut active = vec![true; k];
    let floors: Vec<f64> = (0..k).map(|j| PIVOT_DROP_TOL * m[at(j, j)].abs()).collect();
    for j in 0..k {
        let mut d = m[at(j, j)];
        for l in 0..j {
            d -= m[at(j, l)] * m[at(j, l)];
        }
        if !d.is_finite() {
            return None;
        }
        if d <= floors[j] || d <= 0.0 {
            active[j] = false;
            for l in 0..j {
                m[at(j, l)] = 0.0;
            }
            m[at(j, j)] = 1.0;
            for i in j + 1..k {
                m[at(i, j)] = 0.0;
            }
            continue;
        }
        let d = d.sqrt();
        m[at(j, j)] = d;
        for i in j + 1..k {
            let mut v = m[at(i, j)];
            for l in 0..j {
                v -= m[at(i, l)] * m[at(j, l)];
            }
            m[at(i, j)] = v / d;
        }
    }
    Some(active)
}

/// Solves `L L^T x = b` for the pivot-skip factorization, overwriting `b`;
/// dropped columns receive a zero coefficient.
fn cholesky_solve(chol: &[f64], k: usize, active: &[bool], b: &mut [f64]) {
    let at = |r: usize, c: usize| r * (r + 1) / 2 + c;
    for i in 0..k {
        if !active[i] {
            b[i] = 0.0;
            continue;
        }
        let mut v = b[i];
        for l in 0..i {
            v -= chol[at(i, l)] * b[l];
        }
        b[i] = v / chol[at(i, i)];
    }
    for i in (0..k).rev() {
        if !active[i] {
            b[i] = 0.0;
            continue;
        }
        let mut v = b[i];
        for l in i + 1..k {
            v -= chol[at(l, i)] * b[l];
        }
        b[i] = v / chol[at(i, i)];
    }
}

/// The conditioning variables the backward solvers regress on: current
/// state, current Brownian value, and the realized delayed time when the
/// delay is random (for deterministic delays it is a known constant and
/// carries no information).
#[derive(Clone, Copy)]
pub struct ConditioningSet<'a> {
    pub state: Option<&'a PathArray>,
    pub brownian: Option<&'a PathArray>,
    pub delay: Option<&'a DelayMap>,
}

impl<'a> ConditioningSet<'a> {
    pub fn brownian_only(w: &'a PathArray) -> Self {
        Self {
            state: None,
            brownian: Some(w),
            delay: None,
        }
    }

    pub fn state_and_brownian(x: &'a PathArray, w: &'a PathArray) -> Self {
        Self {
            state: Some(x),
            brownian: Some(w),
            delay: None,
        }
    }

    pub fn with_delay(mut self, delay: &'a DelayMap) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn n_vars(&self) -> usize {
        let delay_counts = self.delay.is_some_and(|d| !d.is_shared()) as usize;
        self.state.is_some() as usize + self.brownian.is_some() as usize + delay_counts
    }

    /// Raw variable matrix (`n_paths x n_vars`) at one node.
    pub fn raw_at_node(&self, node: usize, n_paths: usize, out: &mut Vec<f64>) {
        out.clear();
        let use_delay = self.delay.is_some_and(|d| !d.is_shared());
        for p in 0..n_paths {
            if let Some(x) = self.state {
                out.push(x.get(p, node));
            }
            if let Some(w) = self.brownian {
                out.push(w.get(p, node));
            }
            if use_delay {
                out.push(self.delay.unwrap().delayed_time(p, node));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_counts() {
        assert_eq!(n_monomials(1, 2), 2);
        assert_eq!(n_monomials(2, 2), 5);
        assert_eq!(n_monomials(3, 2), 9);
        assert_eq!(n_monomials(2, 3), 9);
    }

    #[test]
    fn monomial_expansion_degree_two() {
        let mut out = Vec::new();
        expand_monomials(&[2.0, 3.0], 2, &mut out);
        assert_eq!(out, vec![2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn monomial_expansion_degree_three() {
        let mut out = Vec::new();
        expand_monomials(&[2.0, 3.0], 3, &mut out);
        // x, y, x2, xy, y2, x3, x2y, xy2, y3
        assert_eq!(out, vec![2.0, 3.0, 4.0, 6.0, 9.0, 8.0, 12.0, 18.0, 27.0]);
        assert_eq!(out.len(), n_monomials(2, 3));
    }

    #[test]
    fn constant_target_is_reproduced() {
        let n = 64;
        let features: Vec<f64> = (0..n).map(|i| (i as f64 * 0.77).sin()).collect();
        let targets = vec![4.25; n];
        let fit = regress_conditional(&features, n, 1, &targets, &RegressionBasis::default())
            .unwrap();
        for i in 0..n {
            assert!((fit.eval(&features[i..i + 1]) - 4.25).abs() < 1e-10);
        }
    }

    #[test]
    fn representable_target_is_exact() {
        let n = 100;
        let features: Vec<f64> = (0..n).map(|i| (i as f64) / 10.0 - 5.0).collect();
        let targets = features.clone();
        let basis = RegressionBasis {
            degree: 2,
            ridge: 0.0,
        };
        let fit = regress_conditional(&features, n, 1, &targets, &basis).unwrap();
        for i in 0..n {
            assert!((fit.eval(&features[i..i + 1]) - targets[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn too_few_distinct_samples_is_estimation_error() {
        // two distinct sample values cannot determine intercept + x + x^2
        let features = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let targets = vec![0.0, 2.0, 0.0, 2.0, 0.0, 2.0];
        match regress_conditional(&features, 6, 1, &targets, &RegressionBasis::default()) {
            Err(SmpError::Estimation(_)) => {}
            other => panic!("expected estimation error, got {other:?}"),
        }
    }

    #[test]
    fn constant_design_degenerates_to_the_mean() {
        // a fully constant design carries only the intercept: the fit is
        // the sample mean (the conditional expectation under a trivial
        // sigma-algebra)
        let features = vec![1.0, 1.0, 1.0, 1.0];
        let targets = vec![2.0, 4.0, 6.0, 8.0];
        let fit = regress_conditional(&features, 4, 1, &targets, &RegressionBasis::default())
            .unwrap();
        assert_eq!(fit.eval(&[1.0]), 5.0);
    }

    #[test]
    fn collinear_columns_survive_via_ridge_floor() {
        // second variable is an exact multiple of the first: the Gram is
        // singular but the rows are distinct, so the ridge floor engages
        let n = 40;
        let mut features = Vec::with_capacity(2 * n);
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let x = i as f64 * 0.25 - 5.0;
            features.push(x);
            features.push(2.0 * x);
            targets.push(x);
        }
        let fit = regress_conditional(&features, n, 2, &targets, &RegressionBasis::default())
            .unwrap();
        for i in 0..n {
            let x = features[2 * i];
            assert!((fit.eval(&[x, 2.0 * x]) - x).abs() < 1e-6);
        }
    }

    #[test]
    fn brownian_martingale_regression() {
        use crate::brownian::sample_brownian;
        use crate::grid::TimeGrid;
        // E[W_T | W_t] = W_t
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let n_paths = 50_000;
        let bundle = sample_brownian(&grid, n_paths, 7).unwrap();
        let w = bundle.cumulative();
        let node = 5;
        let features: Vec<f64> = (0..n_paths).map(|p| w.get(p, node)).collect();
        let targets: Vec<f64> = (0..n_paths).map(|p| w.get(p, grid.n_steps())).collect();
        let fit = regress_conditional(&features, n_paths, 1, &targets, &RegressionBasis::default())
            .unwrap();
        let mse: f64 = (0..n_paths)
            .map(|p| {
                let d = fit.eval(&features[p..p + 1]) - w.get(p, node);
                d * d
            })
            .sum::<f64>()
            / n_paths as f64;
        // fitted value should track W_t closely in L2
        assert!(mse < 5e-4, "mse {mse}");
    }

    #[test]
    fn multi_target_shares_factorization() {
        let n = 128;
        let raw: Vec<f64> = (0..n).map(|i| (i as f64 * 0.31).cos() * 2.0).collect();
        let t1: Vec<f64> = raw.iter().map(|x| 1.0 + 2.0 * x).collect();
        let t2: Vec<f64> = raw.iter().map(|x| x * x).collect();
        let mut reg = StepRegressor::new(RegressionBasis::default());
        let fits = reg
            .fit_values(&raw, n, 1, &[&t1, &t2])
            .unwrap();
        for i in 0..n {
            assert!((fits[0][i] - t1[i]).abs() < 1e-9);
            assert!((fits[1][i] - t2[i]).abs() < 1e-9);
        }
    }
}
