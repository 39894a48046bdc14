//! Incremental solver for the covariance-guided one-class dual
//!
//! ```text
//! min 1/2 a^T K~ a   s.t.  0 <= a_i <= C,  sum a_i = 1.
//! ```
//!
//! With `g_i = (K~ a)_i - rho` the optimum is characterised by the partition
//!
//! * `S` (margin): `0 < a_i < C`, `g_i = 0`
//! * `E` (bound):  `a_i = C`, `g_i <= 0`
//! * `R` (rest):   `a_i = 0`, `g_i >= 0`
//!
//! A new point enters with `a_c = 0`. If it already satisfies its condition it
//! joins `R`. Otherwise `a_c` is increased while the margin coefficients and
//! `rho` follow the sensitivity direction that keeps `g_S = 0` and the sum
//! constraint; the step stops at the first set change, the bookkeeping is
//! updated, and the loop repeats until the new point settles in `S` or `E`.

mod qinv;

pub use qinv::BorderedInverse;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::batchref::{self, quad_form};
use crate::error::{Error, Result};
use crate::kernel::GramCache;

/// Tolerances and limits for the incremental solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    /// Box bound on each dual coefficient.
    pub c: f64,
    /// KKT tolerance.
    pub epsilon: f64,
    /// Coefficients within this band of 0 or `C` count as bound when seeding
    /// from a batch solution.
    pub bound_band: f64,
    /// Relative Schur-complement threshold below which a point counts as
    /// affinely dependent on the margin set and is kept out of it.
    pub dependence_tol: f64,
    /// Outer iterations allowed to the repair loop before falling back to a
    /// batch solve; `None` means `10 n`.
    pub max_repair_iters: Option<usize>,
    /// Tolerance for batch solves (initialisation and fallback).
    pub batch_tol: f64,
    /// Margin residual above which the margin system is re-solved.
    pub polish_tol: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            c: 0.1,
            epsilon: 1e-6,
            bound_band: 1e-9,
            dependence_tol: 1e-9,
            max_repair_iters: None,
            batch_tol: 1e-10,
            polish_tol: 1e-10,
        }
    }
}

impl SolverParams {
    pub fn with_c(c: f64) -> Self {
        Self {
            c,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "C must be in (0,1], got {}",
                self.c
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Membership of a point in the KKT partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PointSet {
    /// `S`: free coefficient on the margin.
    Margin,
    /// `E`: coefficient at the upper bound `C`.
    Bound,
    /// `R`: zero coefficient.
    Rest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MigrationKind {
    NewToS,
    NewToE,
    /// The driven point settles at `a = 0`: either it satisfied its condition
    /// on arrival, or (repair only) its coefficient was driven down to zero.
    NewToR,
    SToR,
    SToE,
    EToS,
    RToS,
    /// Margin set empty: `rho` moved until a point reached `g = 0` and
    /// entered `S`.
    EmptySRhoShift,
}

/// One set transition along the solution path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MigrationEvent {
    pub kind: MigrationKind,
    pub index: usize,
    /// Step length applied before the transition (`|delta a_c|`, or the
    /// homotopy fraction for margin re-solves).
    pub step: f64,
}

/// Sensitivities of the margin system to the driven coefficient `a_c`.
///
/// `beta[0]` is the rate of `-rho`, `beta[p + 1]` the rate of `a_{S_p}`;
/// `gamma[i]` is the rate of `g_i` for every `i` outside `S` (zero on `S`).
/// `gamma_size[i]` is the sum of the magnitudes of the terms behind
/// `gamma[i]`; rates below rounding noise relative to it are treated as zero.
#[derive(Debug, Clone)]
pub struct Sensitivity {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub gamma_size: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolverStats {
    pub insertions: usize,
    pub migrations: usize,
    pub repairs: usize,
    pub fallbacks: usize,
    pub cycling_guards: usize,
    pub qinv_rebuilds: usize,
}

pub type Observer<'a> = dyn FnMut(&SolverState, &MigrationEvent) + 'a;

const TIE_TOL: f64 = 1e-14;
const CYCLE_STEP: f64 = 1e-12;
const RELEASE_QINV_CHECK_EVERY: usize = 32;
/// Rates of change smaller than this fraction of their terms are noise.
const RATE_NOISE: f64 = 1e-10;

fn significant(rate: f64, size: f64) -> bool {
    rate.abs() > RATE_NOISE * size
}

/// Dual variables, KKT partition and the inverse margin system.
#[derive(Debug, Clone)]
pub struct SolverState {
    alpha: Vec<f64>,
    rho: f64,
    grad: Vec<f64>,
    sets: Vec<PointSet>,
    qinv: BorderedInverse,
    params: SolverParams,
    stats: SolverStats,
    last_event: Option<(MigrationKind, usize)>,
    repair_objectives: Vec<f64>,
}

impl SolverState {
    /// Seeds the state from a batch solution on `gram`: coefficients within
    /// `bound_band` of a bound are snapped to it, `Qinv` is built by
    /// bordering the margin points in index order, and the margin system is
    /// then re-solved so that `g_S = 0` to working precision.
    pub fn from_batch(
        gram: &GramCache,
        solution: &batchref::BatchSolution,
        params: SolverParams,
    ) -> Result<Self> {
        params.validate()?;
        let n = gram.len();
        if solution.alpha.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: solution.alpha.len(),
            });
        }
        let c = params.c;
        let mut alpha = solution.alpha.clone();
        let mut sets = vec![PointSet::Rest; n];
        for (a, set) in alpha.iter_mut().zip(sets.iter_mut()) {
            if *a <= params.bound_band {
                *a = 0.0;
                *set = PointSet::Rest;
            } else if *a >= c - params.bound_band {
                *a = c;
                *set = PointSet::Bound;
            } else {
                *set = PointSet::Margin;
            }
        }
        let defect = 1.0 - alpha.iter().sum::<f64>();
        if defect != 0.0 {
            if let Some(s) = (0..n).find(|&i| {
                sets[i] == PointSet::Margin && alpha[i] + defect > 0.0 && alpha[i] + defect < c
            }) {
                alpha[s] += defect;
            }
        }
        let interior: Vec<usize> = (0..n).filter(|&i| sets[i] == PointSet::Margin).collect();
        for &i in &interior {
            sets[i] = PointSet::Rest;
        }
        let mut state = Self {
            alpha,
            rho: solution.rho,
            grad: vec![0.0; n],
            sets,
            qinv: BorderedInverse::new(),
            params,
            stats: SolverStats::default(),
            last_event: None,
            repair_objectives: Vec::new(),
        };
        for &i in &interior {
            state.admit(gram, i)?;
        }
        state.recompute_gradient(gram);
        let mut sink = |_: &SolverState, _: &MigrationEvent| {};
        let mut trace = Vec::new();
        if state.repair(gram, &mut trace, &mut sink).is_err() {
            log::warn!("repair after batch seeding did not settle; keeping batch solution");
            state.recompute_gradient(gram);
        }
        Ok(state)
    }

    /// Rebuilds a state from stored parts. `margin` fixes the order of the
    /// bordered system. Nothing is re-optimised.
    pub fn from_parts(
        gram: &GramCache,
        alpha: Vec<f64>,
        rho: f64,
        margin: &[usize],
        bound: &[usize],
        rest: &[usize],
        params: SolverParams,
    ) -> Result<Self> {
        params.validate()?;
        let n = gram.len();
        if alpha.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: alpha.len(),
            });
        }
        let mut seen: Vec<Option<PointSet>> = vec![None; n];
        for (list, kind) in [
            (margin, PointSet::Margin),
            (bound, PointSet::Bound),
            (rest, PointSet::Rest),
        ] {
            for &i in list {
                if i >= n {
                    return Err(Error::Schema(format!(
                        "set index {i} out of range (n = {n})"
                    )));
                }
                if seen[i].replace(kind).is_some() {
                    return Err(Error::Schema(format!(
                        "index {i} appears in more than one set"
                    )));
                }
            }
        }
        let sets: Vec<PointSet> = seen
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| Error::Schema(format!("index {i} is in no set"))))
            .collect::<Result<_>>()?;
        if alpha.iter().any(|a| !a.is_finite()) || !rho.is_finite() {
            return Err(Error::NonFinite("stored dual variables".to_string()));
        }
        let qinv = BorderedInverse::from_members(gram, margin, params.dependence_tol)
            .map_err(|e| Error::Schema(e.to_string()))?;
        let mut state = Self {
            alpha,
            rho,
            grad: vec![0.0; n],
            sets,
            qinv,
            params,
            stats: SolverStats::default(),
            last_event: None,
            repair_objectives: Vec::new(),
        };
        state.recompute_gradient(gram);
        Ok(state)
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn params(&self) -> &SolverParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut SolverParams {
        &mut self.params
    }

    pub fn stats(&self) -> SolverStats {
        self.stats
    }

    pub fn set_of(&self, i: usize) -> PointSet {
        self.sets[i]
    }

    /// Margin indices in bordered-system order.
    pub fn margin(&self) -> &[usize] {
        self.qinv.members()
    }

    pub fn bound(&self) -> Vec<usize> {
        self.indices_in(PointSet::Bound)
    }

    pub fn rest(&self) -> Vec<usize> {
        self.indices_in(PointSet::Rest)
    }

    fn indices_in(&self, set: PointSet) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.sets[i] == set).collect()
    }

    pub fn qinv(&self) -> &BorderedInverse {
        &self.qinv
    }

    /// Objectives recorded at each outer iteration of the last repair loop.
    pub fn repair_objectives(&self) -> &[f64] {
        &self.repair_objectives
    }

    /// Exact `g = K~ a - rho` on `gram`.
    pub fn gradient(&self, gram: &GramCache) -> Vec<f64> {
        let n = self.len();
        let mut g = vec![-self.rho; n];
        for (j, &a) in self.alpha.iter().enumerate() {
            if a != 0.0 {
                let row = gram.modified_row(j);
                for (gi, &k) in g.iter_mut().zip(row) {
                    *gi += k * a;
                }
            }
        }
        g
    }

    fn recompute_gradient(&mut self, gram: &GramCache) {
        self.grad = self.gradient(gram);
    }

    /// `1/2 a^T K~ a`, same summation order as [`batchref::objective`].
    pub fn objective(&self, gram: &GramCache) -> f64 {
        quad_form(&self.alpha, |i, j| gram.modified(i, j))
    }

    /// Largest KKT violation on `gram` given the current partition:
    /// `max(0, -g_i)` on `R`, `|g_i|` on `S`, `max(0, g_i)` on `E`.
    pub fn kkt_residual(&self, gram: &GramCache) -> f64 {
        let g = self.gradient(gram);
        self.residual_of(&g)
    }

    /// Same as [`kkt_residual`](Self::kkt_residual) against an arbitrary
    /// dense `K~`.
    pub fn kkt_residual_dense(&self, k: &DMatrix<f64>) -> f64 {
        let n = self.len();
        let mut g = vec![-self.rho; n];
        for (j, &a) in self.alpha.iter().enumerate() {
            if a != 0.0 {
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi += k[(i, j)] * a;
                }
            }
        }
        self.residual_of(&g)
    }

    fn residual_of(&self, g: &[f64]) -> f64 {
        self.sets
            .iter()
            .zip(g)
            .map(|(set, &gi)| violation(*set, gi))
            .fold(0.0, |acc: f64, v| {
                if v.is_nan() || acc.is_nan() {
                    f64::NAN
                } else {
                    acc.max(v)
                }
            })
    }

    /// Checks the sum and box constraints.
    pub fn check_constraints(&self) -> Result<()> {
        let sum: f64 = self.alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::ConstraintViolation { sum });
        }
        let c = self.params.c;
        if let Some(a) = self.alpha.iter().find(|&&a| a < -1e-12 || a > c + 1e-12) {
            return Err(Error::Internal(format!("coefficient {a} outside [0, {c}]")));
        }
        Ok(())
    }

    /// Sensitivity of the margin system to the coefficient of `c`.
    pub fn sensitivity(&self, gram: &GramCache, c: usize) -> Result<Sensitivity> {
        if self.qinv.is_empty() {
            return Err(Error::EmptyMarginSet);
        }
        let margin = self.qinv.members();
        let mut q = Vec::with_capacity(margin.len() + 1);
        q.push(1.0);
        q.extend(margin.iter().map(|&s| gram.modified(s, c)));
        let beta: Vec<f64> = self.qinv.apply(&q).into_iter().map(|v| -v).collect();
        let col_c = gram.modified_row(c);
        let mut gamma = vec![0.0; self.len()];
        let mut gamma_size = vec![0.0; self.len()];
        for i in 0..self.len() {
            if self.sets[i] == PointSet::Margin && i != c {
                continue;
            }
            let row = gram.modified_row(i);
            let mut acc = col_c[i] + beta[0];
            let mut size = col_c[i].abs() + beta[0].abs();
            for (p, &s) in margin.iter().enumerate() {
                acc += row[s] * beta[p + 1];
                size += (row[s] * beta[p + 1]).abs();
            }
            gamma[i] = acc;
            gamma_size[i] = size;
        }
        Ok(Sensitivity {
            beta,
            gamma,
            gamma_size,
        })
    }

    /// Largest admissible step for driving `c` in direction `sign` (+1 grows
    /// `a_c`, -1 shrinks it) and the transition that bounds it. Ties within
    /// `1e-14` go to `NewToS`, then to the smallest index.
    pub fn limit_step(
        &self,
        c: usize,
        sign: f64,
        sens: &Sensitivity,
    ) -> Result<(f64, MigrationEvent)> {
        let cb = self.params.c;
        let eps = self.params.epsilon;
        let mut best: Option<Candidate> = None;
        let mut offer = |step: f64, kind: MigrationKind, index: usize| {
            let cand = Candidate {
                step: step.max(0.0),
                kind,
                index,
            };
            if best.as_ref().is_none_or(|b| cand.beats(b)) {
                best = Some(cand);
            }
        };

        let ac = self.alpha[c];
        if sign > 0.0 {
            offer(cb - ac, MigrationKind::NewToE, c);
        } else {
            offer(ac, MigrationKind::NewToR, c);
        }
        let hc = sign * sens.gamma[c];
        if self.grad[c] * hc < 0.0 && significant(hc, sens.gamma_size[c]) {
            offer(-self.grad[c] / hc, MigrationKind::NewToS, c);
        }
        for (p, &s) in self.qinv.members().iter().enumerate() {
            let b = sign * sens.beta[p + 1];
            if b < 0.0 {
                offer(-self.alpha[s] / b, MigrationKind::SToR, s);
            } else if b > 0.0 {
                offer((cb - self.alpha[s]) / b, MigrationKind::SToE, s);
            }
        }
        for i in 0..self.len() {
            if i == c {
                continue;
            }
            let h = sign * sens.gamma[i];
            if !significant(h, sens.gamma_size[i]) {
                continue;
            }
            match self.sets[i] {
                PointSet::Bound if h > 0.0 && self.grad[i] <= eps => {
                    offer(-self.grad[i] / h, MigrationKind::EToS, i)
                }
                PointSet::Rest if h < 0.0 && self.grad[i] >= -eps => {
                    offer(-self.grad[i] / h, MigrationKind::RToS, i)
                }
                _ => {}
            }
        }
        let best = best.ok_or_else(|| Error::Internal("no finite step bound".to_string()))?;
        if !best.step.is_finite() {
            return Err(Error::Internal("all step bounds are infinite".to_string()));
        }
        Ok((
            best.step,
            MigrationEvent {
                kind: best.kind,
                index: best.index,
                step: best.step,
            },
        ))
    }

    /// With `S` empty no coefficient can move, so `rho` shifts instead:
    /// down (raising every `g`) until `c` or a bound point reaches `g = 0`
    /// when `sign > 0`, up until `c` or a rest point does when `sign < 0`.
    /// The first point to get there joins `S`.
    pub fn empty_s_step(
        &mut self,
        gram: &GramCache,
        c: usize,
        sign: f64,
    ) -> Result<MigrationEvent> {
        if !self.qinv.is_empty() {
            return Err(Error::Internal(
                "empty_s_step with a non-empty margin set".to_string(),
            ));
        }
        let pool = if sign > 0.0 {
            PointSet::Bound
        } else {
            PointSet::Rest
        };
        let mut winner = c;
        let mut target = self.grad[c] + self.rho;
        for i in 0..self.len() {
            if i == c || self.sets[i] != pool {
                continue;
            }
            let v = self.grad[i] + self.rho;
            let better = if sign > 0.0 { v > target } else { v < target };
            if better {
                winner = i;
                target = v;
            }
        }
        let shift = target - self.rho;
        for g in self.grad.iter_mut() {
            *g -= shift;
        }
        self.rho = target;
        self.grad[winner] = 0.0;
        self.sets[winner] = PointSet::Margin;
        let joined = self.qinv.expand(gram, winner, self.params.dependence_tol);
        debug_assert!(joined, "the first margin member always borders");
        Ok(MigrationEvent {
            kind: MigrationKind::EmptySRhoShift,
            index: winner,
            step: 0.0,
        })
    }

    /// Adds the point most recently appended to `gram` (index `n`) and
    /// restores the KKT conditions on all points. `gram` must already hold
    /// the point; see [`add_point`](Self::add_point) for the combined form.
    pub fn insert_extended(
        &mut self,
        gram: &GramCache,
        observer: &mut Observer<'_>,
    ) -> Result<Vec<MigrationEvent>> {
        let c = self.len();
        if gram.len() != c + 1 {
            return Err(Error::DimensionMismatch {
                expected: c + 1,
                got: gram.len(),
            });
        }
        self.alpha.push(0.0);
        self.sets.push(PointSet::Rest);
        self.grad.push(0.0);
        self.stats.insertions += 1;
        self.last_event = None;
        let mut trace = Vec::new();

        if gram.is_frozen() {
            let gc = crate::kernel::dot(gram.modified_row(c), &self.alpha) - self.rho;
            self.grad[c] = gc;
            if gc >= -self.params.epsilon {
                let ev = MigrationEvent {
                    kind: MigrationKind::NewToR,
                    index: c,
                    step: 0.0,
                };
                self.record(&ev, &mut trace, observer);
                return Ok(trace);
            }
            let drove = self.drive(gram, c, 1.0, &mut trace, observer);
            self.fix_mass();
            self.recompute_gradient(gram);
            let settled = drove.is_ok()
                && self.max_margin_residual() <= self.params.polish_tol
                && self.kkt_residual_cached() <= self.params.epsilon;
            if !settled {
                if let Err(e) = drove {
                    log::debug!("incremental path for point {c} failed ({e}); repairing");
                }
                if self.repair(gram, &mut trace, observer).is_err() {
                    self.batch_fallback(gram)?;
                }
            }
        } else {
            // every entry of K~ moved, so the margin system is refactorised
            let members = self.qinv.members().to_vec();
            match BorderedInverse::from_members(gram, &members, self.params.dependence_tol) {
                Ok(q) => {
                    self.qinv = q;
                    self.recompute_gradient(gram);
                    if self.repair(gram, &mut trace, observer).is_err() {
                        self.batch_fallback(gram)?;
                    }
                }
                Err(e) => {
                    log::debug!("{e}; re-solving from scratch");
                    self.batch_fallback(gram)?;
                }
            }
        }
        Ok(trace)
    }

    /// Extends `gram` with `x` and updates the solution.
    pub fn add_point(
        &mut self,
        gram: &mut GramCache,
        x: &[f64],
        observer: &mut Observer<'_>,
    ) -> Result<Vec<MigrationEvent>> {
        if gram.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: gram.len(),
            });
        }
        gram.extend(x)?;
        self.insert_extended(gram, observer)
    }

    fn record(
        &mut self,
        ev: &MigrationEvent,
        trace: &mut Vec<MigrationEvent>,
        observer: &mut Observer<'_>,
    ) {
        self.stats.migrations += 1;
        trace.push(*ev);
        observer(self, ev);
    }

    /// Drives the coefficient of `c` (not in `S`) until `c` satisfies its
    /// KKT condition, migrating points between sets along the way.
    fn drive(
        &mut self,
        gram: &GramCache,
        c: usize,
        sign: f64,
        trace: &mut Vec<MigrationEvent>,
        observer: &mut Observer<'_>,
    ) -> Result<()> {
        let cap = 10 * self.len() + 100;
        for _ in 0..cap {
            if self.qinv.is_empty() {
                let ev = self.empty_s_step(gram, c, sign)?;
                self.record(&ev, trace, observer);
                self.check_qinv(gram)?;
                if ev.index == c {
                    return Ok(());
                }
                continue;
            }
            let sens = self.sensitivity(gram, c)?;
            let (mut step, mut ev) = self.limit_step(c, sign, &sens)?;
            if step < TIE_TOL && self.reverses_last(&ev) {
                log::warn!(
                    "cycling guard: {:?} on {} reverses the previous migration; forcing a step of {CYCLE_STEP:e}",
                    ev.kind,
                    ev.index
                );
                self.stats.cycling_guards += 1;
                step = CYCLE_STEP;
                ev.step = step;
            }
            self.apply_drive_step(c, sign * step, &sens);
            self.migrate(gram, c, &ev)?;
            self.record(&ev, trace, observer);
            self.check_qinv(gram)?;
            if matches!(
                ev.kind,
                MigrationKind::NewToS | MigrationKind::NewToE | MigrationKind::NewToR
            ) {
                return Ok(());
            }
        }
        Err(Error::Internal(format!(
            "point {c} did not settle within {cap} migrations"
        )))
    }

    fn apply_drive_step(&mut self, c: usize, delta: f64, sens: &Sensitivity) {
        let cb = self.params.c;
        self.alpha[c] = (self.alpha[c] + delta).clamp(0.0, cb);
        for (p, &s) in self.qinv.members().iter().enumerate() {
            self.alpha[s] = (self.alpha[s] + sens.beta[p + 1] * delta).clamp(0.0, cb);
        }
        self.rho -= sens.beta[0] * delta;
        for i in 0..self.len() {
            if self.sets[i] != PointSet::Margin || i == c {
                self.grad[i] += sens.gamma[i] * delta;
            }
        }
    }

    fn reverses_last(&self, ev: &MigrationEvent) -> bool {
        use MigrationKind::*;
        match self.last_event {
            Some((kind, index)) if index == ev.index => matches!(
                (kind, ev.kind),
                (RToS, SToR) | (SToR, RToS) | (EToS, SToE) | (SToE, EToS)
            ),
            _ => false,
        }
    }

    fn migrate(&mut self, gram: &GramCache, c: usize, ev: &MigrationEvent) -> Result<()> {
        use MigrationKind::*;
        let i = ev.index;
        let cb = self.params.c;
        match ev.kind {
            NewToS => {
                debug_assert_eq!(i, c);
                self.admit(gram, i)?;
            }
            NewToE => {
                self.alpha[i] = cb;
                self.sets[i] = PointSet::Bound;
            }
            NewToR => {
                self.alpha[i] = 0.0;
                self.sets[i] = PointSet::Rest;
            }
            SToR => {
                self.alpha[i] = 0.0;
                self.sets[i] = PointSet::Rest;
                self.qinv.shrink(gram, i)?;
            }
            SToE => {
                self.alpha[i] = cb;
                self.sets[i] = PointSet::Bound;
                self.qinv.shrink(gram, i)?;
            }
            EToS | RToS => {
                if !self.admit(gram, i)? {
                    return Err(Error::Internal(format!(
                        "point {i} is affinely dependent on the margin set"
                    )));
                }
            }
            EmptySRhoShift => {}
        }
        self.last_event = Some((ev.kind, i));
        Ok(())
    }

    /// Moves `i` into `S`. A point affinely dependent on `S` cannot join it;
    /// its coefficient is instead moved along the null direction of the
    /// margin system, which changes neither the objective nor any gradient,
    /// until it or a margin coefficient reaches a bound. A margin point that
    /// reaches a bound leaves `S` and admission is retried. Returns whether
    /// `i` ended up in `S`.
    fn admit(&mut self, gram: &GramCache, i: usize) -> Result<bool> {
        let cb = self.params.c;
        for _ in 0..=self.qinv.len() {
            if self.qinv.expand(gram, i, self.params.dependence_tol) {
                self.sets[i] = PointSet::Margin;
                self.grad[i] = 0.0;
                return Ok(true);
            }
            if self.alpha[i] <= 0.0 || self.alpha[i] >= cb {
                return Ok(false);
            }
            let members = self.qinv.members().to_vec();
            let rate: Vec<f64> = self
                .qinv
                .apply(&self.qinv.border(gram, i))
                .into_iter()
                .skip(1)
                .map(|v| -v)
                .collect();
            // limits for growing (up) and shrinking (down) a_i
            let room = |a: f64, r: f64| {
                if r > 0.0 {
                    (cb - a) / r
                } else if r < 0.0 {
                    -a / r
                } else {
                    f64::INFINITY
                }
            };
            let mut up = (cb - self.alpha[i], None);
            let mut down = (self.alpha[i], None);
            for (p, &s) in members.iter().enumerate() {
                let a = self.alpha[s];
                let t = room(a, rate[p]);
                if t < up.0 {
                    up = (t, Some(p));
                }
                let t = room(a, -rate[p]);
                if t < down.0 {
                    down = (t, Some(p));
                }
            }
            let (t, hit) = if up.0 <= down.0 {
                up
            } else {
                (-down.0, down.1)
            };
            self.alpha[i] = (self.alpha[i] + t).clamp(0.0, cb);
            for (p, &s) in members.iter().enumerate() {
                self.alpha[s] = (self.alpha[s] + t * rate[p]).clamp(0.0, cb);
            }
            match hit {
                None => {
                    let top = t > 0.0;
                    self.alpha[i] = if top { cb } else { 0.0 };
                    self.sets[i] = if top { PointSet::Bound } else { PointSet::Rest };
                    self.fix_mass();
                    return Ok(false);
                }
                Some(p) => {
                    let s = members[p];
                    let top = t * rate[p] > 0.0;
                    self.alpha[s] = if top { cb } else { 0.0 };
                    self.sets[s] = if top { PointSet::Bound } else { PointSet::Rest };
                    self.qinv.shrink(gram, s)?;
                    self.fix_mass();
                }
            }
        }
        Err(Error::Internal(format!("point {i} could not be placed")))
    }

    /// Verifies `Qinv Q = I` (every step in debug builds, sampled in
    /// release) and re-inverts densely when it has drifted.
    fn check_qinv(&mut self, gram: &GramCache) -> Result<()> {
        let due = cfg!(debug_assertions)
            || self
                .stats
                .migrations
                .is_multiple_of(RELEASE_QINV_CHECK_EVERY);
        if due && self.qinv.residual(gram) > 1e-8 {
            log::debug!("re-inverting margin system after drift");
            self.stats.qinv_rebuilds += 1;
            self.qinv.rebuild(gram)?;
        }
        Ok(())
    }

    /// Puts any rounding defect in `sum a = 1` on a margin coefficient that
    /// can absorb it.
    fn fix_mass(&mut self) {
        let defect = 1.0 - self.alpha.iter().sum::<f64>();
        if defect.abs() <= 1e-14 {
            return;
        }
        let c = self.params.c;
        if let Some(&s) = self.qinv.members().iter().find(|&&s| {
            let a = self.alpha[s] + defect;
            a > 0.0 && a < c
        }) {
            self.alpha[s] += defect;
        }
    }

    fn max_margin_residual(&self) -> f64 {
        self.qinv
            .members()
            .iter()
            .map(|&s| self.grad[s].abs())
            .fold(0.0, f64::max)
    }

    fn kkt_residual_cached(&self) -> f64 {
        self.residual_of(&self.grad)
    }

    /// Re-solves the margin system for `g_S = 0` along a homotopy
    /// `g_S(t) = (1 - t) g_S(0)`, `t in [0, 1]`, migrating points whenever a
    /// margin coefficient hits a bound or an outside point reaches `g = 0`.
    /// Each segment heads to the minimiser of the objective on the current
    /// face, so the objective does not increase.
    fn restore_margin(
        &mut self,
        gram: &GramCache,
        trace: &mut Vec<MigrationEvent>,
        observer: &mut Observer<'_>,
    ) -> Result<()> {
        let cap = 4 * self.len() + 100;
        let eps = self.params.epsilon;
        let cb = self.params.c;
        for _ in 0..cap {
            if self.qinv.is_empty() {
                return Ok(());
            }
            let members = self.qinv.members().to_vec();
            let mut rhs = Vec::with_capacity(members.len() + 1);
            rhs.push(0.0);
            rhs.extend(members.iter().map(|&s| -self.grad[s]));
            let dir = self.qinv.apply(&rhs);

            let n = self.len();
            let mut h = vec![0.0; n];
            let mut h_size = vec![0.0; n];
            for i in 0..n {
                if self.sets[i] == PointSet::Margin {
                    continue;
                }
                let row = gram.modified_row(i);
                let mut acc = dir[0];
                let mut size = dir[0].abs();
                for (p, &s) in members.iter().enumerate() {
                    acc += row[s] * dir[p + 1];
                    size += (row[s] * dir[p + 1]).abs();
                }
                h[i] = acc;
                h_size[i] = size;
            }

            let mut best: Option<Candidate> = None;
            let mut offer = |step: f64, kind: MigrationKind, index: usize| {
                let cand = Candidate {
                    step: step.max(0.0),
                    kind,
                    index,
                };
                if cand.step < 1.0 && best.as_ref().is_none_or(|b| cand.beats(b)) {
                    best = Some(cand);
                }
            };
            for (p, &s) in members.iter().enumerate() {
                let d = dir[p + 1];
                if d < 0.0 {
                    offer(-self.alpha[s] / d, MigrationKind::SToR, s);
                } else if d > 0.0 {
                    offer((cb - self.alpha[s]) / d, MigrationKind::SToE, s);
                }
            }
            for i in 0..n {
                if !significant(h[i], h_size[i]) {
                    continue;
                }
                match self.sets[i] {
                    PointSet::Bound if h[i] > 0.0 && self.grad[i] <= eps => {
                        offer(-self.grad[i] / h[i], MigrationKind::EToS, i)
                    }
                    PointSet::Rest if h[i] < 0.0 && self.grad[i] >= -eps => {
                        offer(-self.grad[i] / h[i], MigrationKind::RToS, i)
                    }
                    _ => {}
                }
            }

            let t = best.as_ref().map_or(1.0, |b| b.step);
            for (p, &s) in members.iter().enumerate() {
                // ties resolved elsewhere can leave a rounding excursion past a bound
                self.alpha[s] = (self.alpha[s] + t * dir[p + 1]).clamp(0.0, cb);
                self.grad[s] *= 1.0 - t;
            }
            self.rho -= t * dir[0];
            for ((g, set), hi) in self.grad.iter_mut().zip(&self.sets).zip(&h) {
                if *set != PointSet::Margin {
                    *g += t * hi;
                }
            }
            match best {
                None => {
                    for &s in &members {
                        self.grad[s] = 0.0;
                    }
                    self.fix_mass();
                    return Ok(());
                }
                Some(cand) => {
                    let ev = MigrationEvent {
                        kind: cand.kind,
                        index: cand.index,
                        step: cand.step,
                    };
                    self.migrate(gram, usize::MAX, &ev)?;
                    self.record(&ev, trace, observer);
                    self.check_qinv(gram)?;
                }
            }
        }
        Err(Error::Internal(
            "margin re-solve did not terminate".to_string(),
        ))
    }

    /// Restores KKT on all points after `K~` changed or numerical drift:
    /// re-solve the margin system, then drive the worst outside violator,
    /// until nothing violates by more than `epsilon`.
    fn repair(
        &mut self,
        gram: &GramCache,
        trace: &mut Vec<MigrationEvent>,
        observer: &mut Observer<'_>,
    ) -> Result<()> {
        self.stats.repairs += 1;
        self.repair_objectives.clear();
        let cap = self.params.max_repair_iters.unwrap_or(10 * self.len());
        let eps = self.params.epsilon;
        for _ in 0..cap.max(1) {
            self.recompute_gradient(gram);
            self.repair_objectives.push(self.objective(gram));
            if self.max_margin_residual() > self.params.polish_tol {
                self.restore_margin(gram, trace, observer)?;
                continue;
            }
            let mut worst: Option<(usize, f64, f64)> = None;
            for i in 0..self.len() {
                let (v, sign) = match self.sets[i] {
                    PointSet::Rest => (-self.grad[i], 1.0),
                    PointSet::Bound => (self.grad[i], -1.0),
                    PointSet::Margin => continue,
                };
                if v > eps && worst.is_none_or(|(_, w, _)| v > w) {
                    worst = Some((i, v, sign));
                }
            }
            let Some((c, _, sign)) = worst else {
                return Ok(());
            };
            self.last_event = None;
            self.drive(gram, c, sign, trace, observer)?;
        }
        Err(Error::Internal(format!("repair exceeded {cap} iterations")))
    }

    /// Warm-started batch solve on the current `K~`, then reseeds the
    /// partition and the margin system from it.
    fn batch_fallback(&mut self, gram: &GramCache) -> Result<()> {
        log::info!("falling back to a batch solve at n = {}", self.len());
        self.stats.fallbacks += 1;
        let k = gram.modified_gram();
        let sol = batchref::solve_batch_warm(
            &k,
            self.params.c,
            self.params.batch_tol,
            Some(&self.alpha),
        )?;
        let stats = self.stats;
        let mut fresh = Self::from_batch(gram, &sol, self.params)?;
        fresh.stats = stats;
        fresh.stats.repairs += 1;
        *self = fresh;
        Ok(())
    }
}

fn violation(set: PointSet, g: f64) -> f64 {
    match set {
        PointSet::Rest => (-g).max(0.0),
        PointSet::Margin => g.abs(),
        PointSet::Bound => g.max(0.0),
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    step: f64,
    kind: MigrationKind,
    index: usize,
}

impl Candidate {
    fn priority(&self) -> u8 {
        if self.kind == MigrationKind::NewToS {
            0
        } else {
            1
        }
    }

    fn beats(&self, other: &Candidate) -> bool {
        if self.step < other.step - TIE_TOL {
            return true;
        }
        if self.step > other.step + TIE_TOL {
            return false;
        }
        (self.priority(), self.index) < (other.priority(), other.index)
    }
}

#[cfg(test)]
mod tests;
