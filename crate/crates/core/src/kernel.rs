//! Kernel evaluation and Gram matrix maintenance.
//!
//! Besides the plain Gram matrix `K`, the cache keeps the covariance-modified
//! Gram matrix
//!
//! ```text
//! K~ = (1 - eta) K + (eta / m) K_b H_m K_b^T
//! ```
//!
//! where `K_b` holds kernel values against the covariance basis (the first
//! `m` stored points) and `H_m = I - 11^T / m` is the centering matrix. For
//! `w = sum_i alpha_i phi(x_i)` the second term is `alpha^T K_b H K_b^T alpha / m
//! = w^T Sigma w`, the variance of the basis projected on `w`, so large `eta`
//! penalises directions of high feature-space variance.
//!
//! While the basis is still growing (always, in [`CovarianceMode::Full`]) the
//! covariance term is kept through the moments `G = K K` and `s = K 1`, which
//! admit an `O(n^2)` update per insertion. Once frozen, each point stores its
//! centered basis row `z_i = H kappa_i`, and `K~_ij = (1-eta) K_ij + eta z_i.z_j / m`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Linear,
    Rbf,
    Poly,
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "rbf" => Ok(Self::Rbf),
            "poly" => Ok(Self::Poly),
            other => Err(Error::InvalidParameter(format!(
                "unknown kernel family `{other}` (expected linear, rbf or poly)"
            ))),
        }
    }
}

/// Kernel family plus hyperparameters.
///
/// * linear: `k(x, y) = x.y`
/// * rbf: `k(x, y) = exp(-gamma |x - y|^2)`
/// * poly: `k(x, y) = (x.y + coef0)^degree`
///
/// Parameters that the family does not use are ignored by `PartialEq`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub gamma: f64,
    pub degree: u32,
    pub coef0: f64,
}

impl PartialEq for KernelSpec {
    fn eq(&self, other: &Self) -> bool {
        if self.family != other.family {
            return false;
        }
        match self.family {
            KernelFamily::Linear => true,
            KernelFamily::Rbf => self.gamma == other.gamma,
            KernelFamily::Poly => self.degree == other.degree && self.coef0 == other.coef0,
        }
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::rbf(0.5)
    }
}

impl KernelSpec {
    pub fn linear() -> Self {
        Self {
            family: KernelFamily::Linear,
            gamma: 0.5,
            degree: 3,
            coef0: 0.0,
        }
    }

    pub fn rbf(gamma: f64) -> Self {
        Self {
            family: KernelFamily::Rbf,
            gamma,
            degree: 3,
            coef0: 0.0,
        }
    }

    pub fn poly(degree: u32, coef0: f64) -> Self {
        Self {
            family: KernelFamily::Poly,
            gamma: 0.5,
            degree,
            coef0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            KernelFamily::Rbf if !(self.gamma > 0.0 && self.gamma.is_finite()) => Err(
                Error::InvalidParameter(format!("rbf gamma must be > 0, got {}", self.gamma)),
            ),
            KernelFamily::Poly if self.degree < 1 => Err(Error::InvalidParameter(
                "poly degree must be >= 1".to_string(),
            )),
            KernelFamily::Poly if !self.coef0.is_finite() => Err(Error::InvalidParameter(
                "poly coef0 must be finite".to_string(),
            )),
            _ => Ok(()),
        }
    }

    /// Evaluates `k(x, y)`, checking dimensions.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: y.len(),
            });
        }
        Ok(self.eval_unchecked(x, y))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Linear => dot(x, y),
            KernelFamily::Rbf => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-self.gamma * d2).exp()
            }
            KernelFamily::Poly => (dot(x, y) + self.coef0).powi(self.degree as i32),
        }
    }
}

/// Free-function form of [`KernelSpec::eval`].
pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.eval(x, y)
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Whether the covariance term is computed over the warmup batch only or over
/// every point seen so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    #[default]
    Frozen,
    Full,
}

impl std::str::FromStr for CovarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Self::Frozen),
            "full" => Ok(Self::Full),
            other => Err(Error::InvalidParameter(format!(
                "unknown covariance mode `{other}` (expected frozen or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
enum Basis {
    /// Basis = all stored points. `cross = K K`, `sums = K 1`.
    Growing {
        cross: Vec<Vec<f64>>,
        sums: Vec<f64>,
    },
    /// Basis = first `size` points; `centered[i] = H_m kappa_i`.
    Frozen {
        size: usize,
        centered: Vec<Vec<f64>>,
    },
}

/// Growing base and covariance-modified Gram matrices over the stored points.
#[derive(Debug, Clone)]
pub struct GramCache {
    spec: KernelSpec,
    eta: f64,
    mode: CovarianceMode,
    points: Vec<Vec<f64>>,
    base: Vec<Vec<f64>>,
    modified: Vec<Vec<f64>>,
    basis: Basis,
}

impl GramCache {
    /// Empty cache. The covariance basis grows with every insertion until
    /// [`freeze_basis`](Self::freeze_basis) is called.
    pub fn new(spec: KernelSpec, eta: f64, mode: CovarianceMode) -> Result<Self> {
        spec.validate()?;
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidParameter(format!(
                "eta must be in [0,1], got {eta}"
            )));
        }
        if eta == 1.0 {
            log::warn!("eta = 1 drops the plain kernel term; the modified Gram matrix may be rank-deficient");
        }
        Ok(Self {
            spec,
            eta,
            mode,
            points: Vec::new(),
            base: Vec::new(),
            modified: Vec::new(),
            basis: Basis::Growing {
                cross: Vec::new(),
                sums: Vec::new(),
            },
        })
    }

    /// Cache seeded with `basis` points. In frozen mode the basis is frozen
    /// right away, so later insertions leave every existing `K~` entry intact.
    pub fn with_basis(
        spec: KernelSpec,
        eta: f64,
        mode: CovarianceMode,
        basis: &[Vec<f64>],
    ) -> Result<Self> {
        let mut cache = Self::new(spec, eta, mode)?;
        for p in basis {
            cache.extend(p)?;
        }
        if mode == CovarianceMode::Frozen {
            cache.freeze_basis()?;
        }
        Ok(cache)
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn mode(&self) -> CovarianceMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.points.first().map(Vec::len)
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Number of points defining the covariance term.
    pub fn basis_size(&self) -> usize {
        match &self.basis {
            Basis::Growing { .. } => self.points.len(),
            Basis::Frozen { size, .. } => *size,
        }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self.basis, Basis::Frozen { .. })
    }

    /// Base Gram matrix rows.
    pub fn base(&self) -> &[Vec<f64>] {
        &self.base
    }

    /// `K~_ij`.
    #[inline]
    pub fn modified(&self, i: usize, j: usize) -> f64 {
        self.modified[i][j]
    }

    /// Row `i` of `K~`.
    #[inline]
    pub fn modified_row(&self, i: usize) -> &[f64] {
        &self.modified[i]
    }

    /// Dense copy of `K~`.
    pub fn modified_gram(&self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| self.modified[i][j])
    }

    /// Dense copy of `K`.
    pub fn base_gram(&self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| self.base[i][j])
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if let Some(d) = self.dim() {
            if d != x.len() {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: x.len(),
                });
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input point".to_string()));
        }
        Ok(())
    }

    #[inline]
    fn mix(&self, k: f64, cov: f64) -> f64 {
        if self.eta == 0.0 {
            k
        } else {
            (1.0 - self.eta) * k + self.eta * cov
        }
    }

    /// Plain kernel values of `x` against every stored point.
    pub fn kernel_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Ok(self
            .points
            .iter()
            .map(|p| self.spec.eval_unchecked(x, p))
            .collect())
    }

    /// Appends `x`, bordering `K` and `K~` with one row and column.
    pub fn extend(&mut self, x: &[f64]) -> Result<()> {
        self.check_point(x)?;
        let n = self.points.len();
        let kappa: Vec<f64> = self
            .points
            .iter()
            .map(|p| self.spec.eval_unchecked(x, p))
            .collect();
        let self_k = self.spec.eval_unchecked(x, x);

        for (row, &k) in self.base.iter_mut().zip(&kappa) {
            row.push(k);
        }
        let mut new_row = kappa.clone();
        new_row.push(self_k);
        self.base.push(new_row);
        self.points.push(x.to_vec());

        match &mut self.basis {
            Basis::Growing { cross, sums } => {
                // G <- G + kappa kappa^T on the old block, then border.
                for i in 0..n {
                    let ki = kappa[i];
                    let row = &mut cross[i];
                    for j in 0..n {
                        row[j] += ki * kappa[j];
                    }
                    sums[i] += ki;
                }
                let base = &self.base;
                let mut g_new = vec![0.0; n + 1];
                for (j, g) in g_new.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (b, row) in base[n].iter().zip(base) {
                        acc += b * row[j];
                    }
                    *g = acc;
                }
                for (i, row) in cross.iter_mut().enumerate() {
                    row.push(g_new[i]);
                }
                cross.push(g_new);
                sums.push(base[n].iter().sum());
                self.rebuild_growing();
            }
            Basis::Frozen { size, centered } => {
                // the new point never joins a frozen basis
                let m = *size;
                let z = center(&kappa[..m]);
                let scale = 1.0 / m as f64;
                let eta = self.eta;
                let mix = |k: f64, cov: f64| {
                    if eta == 0.0 {
                        k
                    } else {
                        (1.0 - eta) * k + eta * cov
                    }
                };
                let mut row: Vec<f64> = (0..n)
                    .map(|j| mix(kappa[j], dot(&z, &centered[j]) * scale))
                    .collect();
                for (r, &v) in self.modified.iter_mut().zip(&row) {
                    r.push(v);
                }
                row.push(mix(self_k, dot(&z, &z) * scale));
                self.modified.push(row);
                centered.push(z);
            }
        }
        Ok(())
    }

    fn rebuild_growing(&mut self) {
        let Basis::Growing { cross, sums } = &self.basis else {
            return;
        };
        let n = self.points.len();
        let m = n as f64;
        let mut modified = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let cov = (cross[i][j] - sums[i] * sums[j] / m) / m;
                let v = self.mix(self.base[i][j], cov);
                modified[i][j] = v;
                modified[j][i] = v;
            }
        }
        self.modified = modified;
    }

    /// Fixes the covariance basis to the points stored so far.
    pub fn freeze_basis(&mut self) -> Result<()> {
        if self.is_frozen() {
            return Ok(());
        }
        let m = self.points.len();
        if m == 0 {
            return Err(Error::InvalidParameter(
                "cannot freeze an empty covariance basis".to_string(),
            ));
        }
        let centered: Vec<Vec<f64>> = self.base.iter().map(|row| center(&row[..m])).collect();
        let scale = 1.0 / m as f64;
        let mut modified = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in i..m {
                let cov = dot(&centered[i], &centered[j]) * scale;
                let v = self.mix(self.base[i][j], cov);
                modified[i][j] = v;
                modified[j][i] = v;
            }
        }
        self.modified = modified;
        self.basis = Basis::Frozen { size: m, centered };
        Ok(())
    }

    /// `k~(x, x_j)` for every stored point `x_j`.
    pub fn modified_kernel_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        let kappa = self.kernel_row(x)?;
        let n = kappa.len();
        match &self.basis {
            Basis::Growing { sums, .. } => {
                let m = n as f64;
                let total: f64 = kappa.iter().sum();
                Ok((0..n)
                    .map(|j| {
                        let mut acc = 0.0;
                        for (k, row) in kappa.iter().zip(&self.base) {
                            acc += k * row[j];
                        }
                        let cov = (acc - total * sums[j] / m) / m;
                        self.mix(kappa[j], cov)
                    })
                    .collect())
            }
            Basis::Frozen { size, centered } => {
                let z = center(&kappa[..*size]);
                let scale = 1.0 / *size as f64;
                Ok((0..n)
                    .map(|j| self.mix(kappa[j], dot(&z, &centered[j]) * scale))
                    .collect())
            }
        }
    }

    /// Precomputes the weights needed to evaluate `sum_j alpha_j k~(x, x_j)`
    /// in `O(n)` kernel evaluations per probe.
    pub fn expansion(&self, alpha: &[f64]) -> KernelExpansion {
        let m = self.basis_size();
        let mut u = vec![0.0; m];
        for (j, &a) in alpha.iter().enumerate() {
            if a != 0.0 {
                let row = &self.base[j];
                for (ub, &k) in u.iter_mut().zip(&row[..m]) {
                    *ub += a * k;
                }
            }
        }
        KernelExpansion {
            alpha: alpha.to_vec(),
            basis_weights: center(&u),
            basis_size: m,
            eta: self.eta,
        }
    }
}

fn center(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// `x -> sum_j alpha_j k~(x, x_j)` in factored form:
/// `(1 - eta) kappa.alpha + (eta / m) kappa_b.v` with `v = H K_b^T alpha`.
#[derive(Debug, Clone)]
pub struct KernelExpansion {
    alpha: Vec<f64>,
    basis_weights: Vec<f64>,
    basis_size: usize,
    eta: f64,
}

impl KernelExpansion {
    /// Evaluates the expansion given the plain kernel row of the probe.
    pub fn eval(&self, kappa: &[f64]) -> f64 {
        let plain = dot(kappa, &self.alpha);
        if self.eta == 0.0 {
            return plain;
        }
        let cov = dot(&kappa[..self.basis_size], &self.basis_weights) / self.basis_size as f64;
        (1.0 - self.eta) * plain + self.eta * cov
    }
}
