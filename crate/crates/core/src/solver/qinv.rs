//! Inverse of the bordered margin system
//!
//! ```text
//! Q = [ 0   1^T    ]
//!     [ 1   K~_SS  ]
//! ```
//!
//! kept up to date under single-member insertions (Schur-complement
//! bordering) and removals (rank-one downdate of the inverse).

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernel::GramCache;

const SHRINK_PIVOT_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Default)]
pub struct BorderedInverse {
    /// Margin indices in system order; member `p` sits at row/col `p + 1`.
    members: Vec<usize>,
    /// Row-major `(k+1) x (k+1)` inverse, empty when there are no members.
    inv: Vec<f64>,
}

impl BorderedInverse {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds the inverse by bordering `members` in one at a time. Fails if
    /// one of them is affinely dependent on those before it.
    pub fn from_members(gram: &GramCache, members: &[usize], tol: f64) -> Result<Self> {
        let mut q = Self::new();
        for &s in members {
            if !q.expand(gram, s, tol) {
                return Err(Error::Internal(format!(
                    "margin point {s} is affinely dependent on the other margin points"
                )));
            }
        }
        Ok(q)
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Dimension of the bordered system, `|S| + 1`, or 0 for the empty sentinel.
    pub fn dim(&self) -> usize {
        if self.members.is_empty() {
            0
        } else {
            self.members.len() + 1
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inv[i * self.dim() + j]
    }

    pub fn position(&self, index: usize) -> Option<usize> {
        self.members.iter().position(|&s| s == index)
    }

    /// Dense copy of the inverse.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.inv)
    }

    /// The bordered system `Q` itself.
    pub fn system(&self, gram: &GramCache) -> DMatrix<f64> {
        let d = self.dim();
        let mut q = DMatrix::zeros(d, d);
        for (p, &s) in self.members.iter().enumerate() {
            q[(0, p + 1)] = 1.0;
            q[(p + 1, 0)] = 1.0;
            for (r, &t) in self.members.iter().enumerate() {
                q[(p + 1, r + 1)] = gram.modified(s, t);
            }
        }
        q
    }

    /// `Qinv * v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim();
        debug_assert_eq!(v.len(), d);
        (0..d)
            .map(|i| {
                let row = &self.inv[i * d..(i + 1) * d];
                row.iter().zip(v).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    /// The border column `[1, K~_{S,i}]` of point `i`.
    pub fn border(&self, gram: &GramCache, i: usize) -> Vec<f64> {
        let mut q = Vec::with_capacity(self.dim());
        q.push(1.0);
        q.extend(self.members.iter().map(|&s| gram.modified(s, i)));
        q
    }

    /// Borders `new_s` into the system. Returns `false` and leaves the
    /// system untouched when `new_s` is affinely dependent on the members,
    /// i.e. its Schur complement does not exceed `tol` times the magnitude
    /// of the terms it was computed from.
    #[must_use]
    pub fn expand(&mut self, gram: &GramCache, new_s: usize, tol: f64) -> bool {
        debug_assert!(!self.members.contains(&new_s));
        let d_new = gram.modified(new_s, new_s);
        if self.members.is_empty() {
            self.members.push(new_s);
            self.inv = vec![-d_new, 1.0, 1.0, 0.0];
            return true;
        }
        let dim = self.dim();
        let q = self.border(gram, new_s);
        let r = self.apply(&q);
        let qr: f64 = q.iter().zip(&r).map(|(a, b)| a * b).sum();
        let size: f64 = d_new.abs() + q.iter().zip(&r).map(|(a, b)| (a * b).abs()).sum::<f64>();
        let kappa = d_new - qr;
        if kappa.is_nan() || kappa <= tol * size {
            log::debug!(
                "point {new_s} is dependent on the margin set (schur complement {kappa:e})"
            );
            return false;
        }
        let nd = dim + 1;
        let mut inv = vec![0.0; nd * nd];
        for i in 0..dim {
            for j in 0..dim {
                inv[i * nd + j] = self.inv[i * dim + j] + r[i] * r[j] / kappa;
            }
            inv[i * nd + dim] = -r[i] / kappa;
            inv[dim * nd + i] = -r[i] / kappa;
        }
        inv[dim * nd + dim] = 1.0 / kappa;
        self.inv = inv;
        self.members.push(new_s);
        true
    }

    /// Removes `leaving` from the system. Falls back to dense re-inversion
    /// when the pivot is too small.
    pub fn shrink(&mut self, gram: &GramCache, leaving: usize) -> Result<()> {
        let p = self
            .position(leaving)
            .ok_or_else(|| Error::Internal(format!("point {leaving} is not a margin member")))?;
        if self.members.len() == 1 {
            *self = Self::new();
            return Ok(());
        }
        let dim = self.dim();
        let k = p + 1;
        let pivot = self.inv[k * dim + k];
        if pivot.abs() < SHRINK_PIVOT_FLOOR {
            self.members.remove(p);
            return self.rebuild(gram);
        }
        let nd = dim - 1;
        let mut inv = Vec::with_capacity(nd * nd);
        for i in (0..dim).filter(|&i| i != k) {
            let f = self.inv[i * dim + k] / pivot;
            for j in (0..dim).filter(|&j| j != k) {
                inv.push(self.inv[i * dim + j] - f * self.inv[k * dim + j]);
            }
        }
        self.inv = inv;
        self.members.remove(p);
        Ok(())
    }

    /// Recomputes the inverse densely from `Q`.
    pub fn rebuild(&mut self, gram: &GramCache) -> Result<()> {
        if self.members.is_empty() {
            self.inv.clear();
            return Ok(());
        }
        let q = self.system(gram);
        let d = q.nrows();
        let inv = q
            .try_inverse()
            .ok_or_else(|| Error::Internal("bordered margin system is singular".to_string()))?;
        self.inv = (0..d * d).map(|idx| inv[(idx / d, idx % d)]).collect();
        Ok(())
    }

    /// `max |Qinv Q - I|`, 0 for the empty sentinel.
    pub fn residual(&self, gram: &GramCache) -> f64 {
        if self.members.is_empty() {
            return 0.0;
        }
        let prod = self.to_matrix() * self.system(gram);
        let d = prod.nrows();
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((prod[(i, j)] - target).abs());
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{CovarianceMode, KernelSpec};

    fn cache(n: usize) -> GramCache {
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let t = i as f64;
                vec![(1.3 * t).sin() * 2.0, (0.7 * t + 0.4).cos() * 1.5]
            })
            .collect();
        GramCache::with_basis(KernelSpec::rbf(0.5), 0.3, CovarianceMode::Frozen, &pts).unwrap()
    }

    fn dense_inverse(q: &BorderedInverse, g: &GramCache) -> DMatrix<f64> {
        q.system(g).try_inverse().unwrap()
    }

    #[test]
    fn first_member_closed_form() {
        let g = cache(3);
        let mut q = BorderedInverse::new();
        assert!(q.expand(&g, 1, 1e-9));
        let d = g.modified(1, 1);
        assert_eq!(
            q.to_matrix(),
            DMatrix::from_row_slice(2, 2, &[-d, 1.0, 1.0, 0.0])
        );
    }

    #[test]
    fn expand_matches_dense_inverse() {
        let g = cache(6);
        let q = BorderedInverse::from_members(&g, &[4, 0, 2, 5, 1], 1e-9).unwrap();
        assert!(q.residual(&g) <= 1e-8);
        let dense = dense_inverse(&q, &g);
        assert!((q.to_matrix() - dense).amax() <= 1e-8);
    }

    #[test]
    fn shrink_matches_dense_inverse_of_reduced_system() {
        let g = cache(6);
        let mut q = BorderedInverse::from_members(&g, &[0, 1, 2, 3, 4], 1e-9).unwrap();
        q.shrink(&g, 2).unwrap();
        assert_eq!(q.members(), &[0, 1, 3, 4]);
        let reduced = BorderedInverse::from_members(&g, &[0, 1, 3, 4], 1e-9).unwrap();
        let dense = dense_inverse(&reduced, &g);
        assert!((q.to_matrix() - dense).amax() <= 1e-9);
    }

    #[test]
    fn expand_then_shrink_roundtrip() {
        let g = cache(6);
        let mut q = BorderedInverse::from_members(&g, &[0, 3, 5], 1e-9).unwrap();
        let before = q.to_matrix();
        assert!(q.expand(&g, 2, 1e-9));
        q.shrink(&g, 2).unwrap();
        assert!((q.to_matrix() - before).amax() <= 1e-9);
    }

    #[test]
    fn shrink_singleton_gives_sentinel() {
        let g = cache(2);
        let mut q = BorderedInverse::from_members(&g, &[1], 1e-9).unwrap();
        q.shrink(&g, 1).unwrap();
        assert!(q.is_empty());
        assert_eq!(q.dim(), 0);
    }

    #[test]
    fn duplicate_member_is_rejected() {
        let pts = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0, 2.0]];
        let g =
            GramCache::with_basis(KernelSpec::linear(), 0.0, CovarianceMode::Frozen, &pts).unwrap();
        let mut q = BorderedInverse::from_members(&g, &[0], 1e-9).unwrap();
        assert!(!q.expand(&g, 1, 1e-9));
        assert_eq!(q.members(), &[0]);
        assert!(q.expand(&g, 2, 1e-9));
        assert!(BorderedInverse::from_members(&g, &[0, 2, 1], 1e-9).is_err());
    }

    #[test]
    fn zero_row_joins_only_as_the_first_member() {
        // (0, 0) has an all-zero linear kernel row
        let pts = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]];
        let g =
            GramCache::with_basis(KernelSpec::linear(), 0.0, CovarianceMode::Frozen, &pts).unwrap();
        let q = BorderedInverse::from_members(&g, &[0, 2], 1e-9).unwrap();
        assert!(q.residual(&g) <= 1e-12);
        let mut q = BorderedInverse::from_members(&g, &[0], 1e-9).unwrap();
        assert!(!q.expand(&g, 1, 1e-9));
    }

    #[test]
    fn unknown_member_shrink_fails() {
        let g = cache(3);
        let mut q = BorderedInverse::from_members(&g, &[0], 1e-9).unwrap();
        assert!(q.shrink(&g, 2).is_err());
    }
}
