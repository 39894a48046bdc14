//! Public classifier: fit on a warmup batch, stream further points in
//! exactly, score, and persist.

use serde::{Deserialize, Serialize};

use crate::batchref;
use crate::data::{zscore_apply, zscore_fit, Normalizer};
use crate::error::{Error, Result};
use crate::kernel::{CovarianceMode, GramCache, KernelExpansion, KernelSpec};
use crate::solver::{MigrationEvent, Observer, SolverParams, SolverState};

pub const FORMAT_VERSION: i64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kernel: KernelSpec,
    /// Weight of the covariance term, in `[0, 1]`.
    pub eta: f64,
    /// Box bound on each dual coefficient.
    pub c: f64,
    pub mode: CovarianceMode,
    /// Requested warmup size; the effective size is never below `ceil(1/C)` or 2.
    pub warmup: usize,
    pub epsilon: f64,
    /// Z-score features using statistics of the warmup batch.
    pub normalize: bool,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::default(),
            eta: 0.5,
            c: 0.1,
            mode: CovarianceMode::Frozen,
            warmup: 20,
            epsilon: 1e-6,
            normalize: false,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidParameter(format!(
                "eta must be in [0,1], got {}",
                self.eta
            )));
        }
        self.solver_params().validate()
    }

    pub fn solver_params(&self) -> SolverParams {
        SolverParams {
            c: self.c,
            epsilon: self.epsilon,
            ..SolverParams::default()
        }
    }

    /// `ceil(1/C)`, the smallest point count with a feasible dual.
    pub fn min_points(&self) -> usize {
        (1.0 / self.c - 1e-9).ceil().max(1.0) as usize
    }

    /// `max(ceil(1/C), warmup, 2)`.
    pub fn warmup_size(&self) -> usize {
        self.min_points().max(self.warmup).max(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Target,
    Outlier,
}

impl Label {
    pub fn as_i8(self) -> i8 {
        match self {
            Label::Target => 1,
            Label::Outlier => -1,
        }
    }
}

/// Incremental covariance-guided one-class SVM.
#[derive(Debug, Clone)]
pub struct Model {
    params: ModelParams,
    gram: GramCache,
    state: SolverState,
    normalizer: Option<Normalizer>,
    expansion: KernelExpansion,
}

impl Model {
    /// Solves the warmup batch, then streams the remaining points in order.
    pub fn fit(points: &[Vec<f64>], params: ModelParams) -> Result<Self> {
        Self::fit_observed(points, params, &mut |_, _| {})
    }

    /// [`fit`](Self::fit) with an observer called after every migration of
    /// the streaming phase.
    pub fn fit_observed(
        points: &[Vec<f64>],
        params: ModelParams,
        observer: &mut Observer<'_>,
    ) -> Result<Self> {
        let (points, normalizer, warmup) = prepare(points, &params)?;
        let gram =
            GramCache::with_basis(params.kernel, params.eta, params.mode, &points[..warmup])?;
        let mut model = Self::solve_batch_on(gram, params, normalizer)?;
        for p in &points[warmup..] {
            model.state.add_point(&mut model.gram, p, observer)?;
        }
        model.refresh();
        Ok(model)
    }

    /// Solves every point at once with the batch solver, using the same
    /// covariance basis [`fit`](Self::fit) would (the warmup batch in frozen
    /// mode, all points in full mode).
    pub fn batch_fit(points: &[Vec<f64>], params: ModelParams) -> Result<Self> {
        let (points, normalizer, warmup) = prepare(points, &params)?;
        let mut gram =
            GramCache::with_basis(params.kernel, params.eta, params.mode, &points[..warmup])?;
        for p in &points[warmup..] {
            gram.extend(p)?;
        }
        Self::solve_batch_on(gram, params, normalizer)
    }

    fn solve_batch_on(
        gram: GramCache,
        params: ModelParams,
        normalizer: Option<Normalizer>,
    ) -> Result<Self> {
        let solver_params = params.solver_params();
        let k = gram.modified_gram();
        let sol = batchref::solve_batch(&k, params.c, solver_params.batch_tol)?;
        if !sol.converged {
            log::warn!(
                "batch solve stopped after {} iterations without converging",
                sol.iterations
            );
        }
        let state = SolverState::from_batch(&gram, &sol, solver_params)?;
        let expansion = gram.expansion(state.alpha());
        Ok(Self {
            params,
            gram,
            state,
            normalizer,
            expansion,
        })
    }

    /// Adds one point, keeping the KKT conditions on all points. Returns the
    /// migration trace. On an input error the model is unchanged.
    pub fn partial_fit(&mut self, x: &[f64]) -> Result<Vec<MigrationEvent>> {
        self.partial_fit_observed(x, &mut |_, _| {})
    }

    pub fn partial_fit_observed(
        &mut self,
        x: &[f64],
        observer: &mut Observer<'_>,
    ) -> Result<Vec<MigrationEvent>> {
        let x = self.transform(x)?;
        let trace = self.state.add_point(&mut self.gram, &x, observer)?;
        self.refresh();
        Ok(trace)
    }

    fn refresh(&mut self) {
        self.expansion = self.gram.expansion(self.state.alpha());
    }

    fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input point".to_string()));
        }
        match &self.normalizer {
            Some(n) => zscore_apply(n, x),
            None => Ok(x.to_vec()),
        }
    }

    /// `f(x) = sum_j a_j k~(x, x_j) - rho`; `f >= 0` means target.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        let x = self.transform(x)?;
        let kappa = self.gram.kernel_row(&x)?;
        Ok(self.expansion.eval(&kappa) - self.state.rho())
    }

    pub fn predict(&self, x: &[f64]) -> Result<Label> {
        Ok(if self.score(x)? >= 0.0 {
            Label::Target
        } else {
            Label::Outlier
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn state(&self) -> &SolverState {
        &self.state
    }

    pub fn gram(&self) -> &GramCache {
        &self.gram
    }

    pub fn normalizer(&self) -> Option<&Normalizer> {
        self.normalizer.as_ref()
    }

    /// Stored (normalised) training points.
    pub fn points(&self) -> &[Vec<f64>] {
        self.gram.points()
    }

    pub fn len(&self) -> usize {
        self.gram.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gram.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.gram.dim().unwrap_or(0)
    }

    pub fn kkt_residual(&self) -> f64 {
        self.state.kkt_residual(&self.gram)
    }

    pub fn objective(&self) -> f64 {
        self.state.objective(&self.gram)
    }

    /// Serialises to the versioned JSON model document.
    pub fn save(&self) -> Result<String> {
        // JSON has no NaN; serde would write `null` and the file would not load
        if self.state.alpha().iter().any(|a| !a.is_finite()) || !self.state.rho().is_finite() {
            return Err(Error::NonFinite("dual variables".to_string()));
        }
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            kernel: self.params.kernel,
            eta: self.params.eta,
            c: self.params.c,
            covariance_mode: self.params.mode,
            feature_dim: self.feature_dim(),
            normalizer: self.normalizer.clone(),
            points: self.gram.points().to_vec(),
            alpha: self.state.alpha().to_vec(),
            rho: self.state.rho(),
            sets: SetsFile {
                s: self.state.margin().to_vec(),
                e: self.state.bound(),
                r: self.state.rest(),
            },
            basis_size: self.gram.basis_size(),
        };
        let mut text = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Schema(format!("cannot serialise model: {e}")))?;
        text.push('\n');
        Ok(text)
    }

    pub fn save_to(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.save()?)?;
        Ok(())
    }

    pub fn load(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Schema(format!("not a JSON document: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Schema("model document must be a JSON object".to_string()))?;
        let version = obj
            .get("format_version")
            .ok_or_else(|| Error::Schema("missing field `format_version`".to_string()))?
            .as_i64()
            .ok_or_else(|| {
                Error::Schema("field `format_version` must be an integer".to_string())
            })?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let file: ModelFile = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                Error::Schema(e.into_inner().to_string())
            } else {
                Error::Schema(format!("field `{path}`: {}", e.into_inner()))
            }
        })?;
        file.into_model()
    }

    pub fn load_from(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::load(&std::fs::read_to_string(path)?)
    }
}

/// Validates, normalises and returns `(points, normalizer, warmup size)`.
fn prepare(
    points: &[Vec<f64>],
    params: &ModelParams,
) -> Result<(Vec<Vec<f64>>, Option<Normalizer>, usize)> {
    params.validate()?;
    let warmup = params.warmup_size();
    if points.len() < warmup {
        return Err(Error::TooFewPoints {
            got: points.len(),
            need: warmup,
            ceil_inv_c: params.min_points(),
            warmup: params.warmup,
        });
    }
    let d = points[0].len();
    if d == 0 {
        return Err(Error::InvalidParameter(
            "points must have at least one feature".to_string(),
        ));
    }
    for (i, p) in points.iter().enumerate() {
        if p.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("training point {i}")));
        }
    }
    if params.normalize {
        let norm = zscore_fit(&points[..warmup])?;
        let pts = points
            .iter()
            .map(|p| zscore_apply(&norm, p))
            .collect::<Result<Vec<_>>>()?;
        Ok((pts, Some(norm), warmup))
    } else {
        Ok((points.to_vec(), None, warmup))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetsFile {
    s: Vec<usize>,
    e: Vec<usize>,
    r: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: i64,
    kernel: KernelSpec,
    eta: f64,
    c: f64,
    covariance_mode: CovarianceMode,
    feature_dim: usize,
    normalizer: Option<Normalizer>,
    points: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    rho: f64,
    sets: SetsFile,
    basis_size: usize,
}

impl ModelFile {
    fn into_model(self) -> Result<Model> {
        let n = self.points.len();
        if n == 0 {
            return Err(Error::Schema("field `points` is empty".to_string()));
        }
        if let Some(p) = self.points.iter().find(|p| p.len() != self.feature_dim) {
            return Err(Error::Schema(format!(
                "field `points`: row of length {} does not match `feature_dim` = {}",
                p.len(),
                self.feature_dim
            )));
        }
        if self.alpha.len() != n {
            return Err(Error::Schema(format!(
                "field `alpha` has {} entries for {n} points",
                self.alpha.len()
            )));
        }
        if let Some(norm) = &self.normalizer {
            if norm.mean.len() != self.feature_dim || norm.std.len() != self.feature_dim {
                return Err(Error::Schema(
                    "field `normalizer` does not match `feature_dim`".to_string(),
                ));
            }
        }
        let basis_ok = match self.covariance_mode {
            CovarianceMode::Frozen => (1..=n).contains(&self.basis_size),
            CovarianceMode::Full => self.basis_size == n,
        };
        if !basis_ok {
            return Err(Error::Schema(format!(
                "field `basis_size` = {} is invalid for {n} points in {:?} mode",
                self.basis_size, self.covariance_mode
            )));
        }
        let params = ModelParams {
            kernel: self.kernel,
            eta: self.eta,
            c: self.c,
            mode: self.covariance_mode,
            warmup: self.basis_size,
            normalize: self.normalizer.is_some(),
            ..ModelParams::default()
        };
        params
            .validate()
            .map_err(|e| Error::Schema(format!("invalid hyperparameters: {e}")))?;
        let mut gram = GramCache::with_basis(
            params.kernel,
            params.eta,
            params.mode,
            &self.points[..self.basis_size],
        )?;
        for p in &self.points[self.basis_size..] {
            gram.extend(p)?;
        }
        let state = SolverState::from_parts(
            &gram,
            self.alpha,
            self.rho,
            &self.sets.s,
            &self.sets.e,
            &self.sets.r,
            params.solver_params(),
        )
        .map_err(|e| match e {
            Error::Schema(msg) => Error::Schema(format!("field `sets`: {msg}")),
            other => other,
        })?;
        let expansion = gram.expansion(state.alpha());
        Ok(Model {
            params,
            gram,
            state,
            normalizer: self.normalizer,
            expansion,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthKind, SynthParams};

    fn gauss(n: usize, seed: u64) -> Vec<Vec<f64>> {
        gen_synthetic(SynthKind::Gauss, n, seed, &SynthParams::default())
            .unwrap()
            .x
    }

    #[test]
    fn warmup_size_rules() {
        let p = ModelParams {
            c: 0.3,
            warmup: 1,
            ..Default::default()
        };
        assert_eq!(p.warmup_size(), 4);
        let p = ModelParams {
            c: 0.1,
            warmup: 25,
            ..Default::default()
        };
        assert_eq!(p.warmup_size(), 25);
        let p = ModelParams {
            c: 1.0,
            warmup: 0,
            ..Default::default()
        };
        assert_eq!(p.warmup_size(), 2);
    }

    #[test]
    fn too_few_points_names_bound() {
        let err = Model::fit(&gauss(5, 1), ModelParams::default()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::TooFewPoints { need: 20, .. }));
        assert!(msg.contains("ceil(1/C) = 10"), "{msg}");
    }

    #[test]
    fn non_finite_rejected() {
        let mut pts = gauss(30, 1);
        pts[3][1] = f64::NAN;
        assert!(matches!(
            Model::fit(&pts, ModelParams::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn exact_warmup_is_pure_batch() {
        let m = Model::fit(&gauss(20, 2), ModelParams::default()).unwrap();
        assert_eq!(m.state().stats().insertions, 0);
        assert!(m.kkt_residual() <= 1e-6);
    }

    #[test]
    fn one_past_warmup_records_one_insertion() {
        let mut m = Model::fit(&gauss(20, 3), ModelParams::default()).unwrap();
        let trace = m.partial_fit(&[0.1, 0.2]).unwrap();
        assert!(!trace.is_empty());
        assert_eq!(m.state().stats().insertions, 1);
    }

    #[test]
    fn partial_fit_errors_leave_model_unchanged() {
        let mut m = Model::fit(&gauss(25, 4), ModelParams::default()).unwrap();
        let before = m.save().unwrap();
        assert!(m.partial_fit(&[1.0]).is_err());
        assert!(m.partial_fit(&[1.0, f64::INFINITY]).is_err());
        assert_eq!(m.save().unwrap(), before);
    }

    #[test]
    fn predict_boundary_convention() {
        let m = Model::fit(&gauss(30, 5), ModelParams::default()).unwrap();
        let s = m.margin_point_score();
        assert!(s.abs() <= 1e-6);
        assert_eq!(m.predict(&[50.0, 50.0]).unwrap(), Label::Outlier);
    }

    impl Model {
        fn margin_point_score(&self) -> f64 {
            let s = self.state.margin()[0];
            let x = self.points()[s].clone();
            self.score(&x).unwrap()
        }
    }

    #[test]
    fn normalizer_is_fit_on_warmup_only() {
        let mut pts = gauss(40, 6);
        for p in pts.iter_mut().skip(20) {
            p[0] += 100.0;
        }
        let params = ModelParams {
            normalize: true,
            ..Default::default()
        };
        let m = Model::fit(&pts, params).unwrap();
        let expected = zscore_fit(&pts[..20]).unwrap();
        assert_eq!(m.normalizer(), Some(&expected));
    }

    #[test]
    fn load_rejects_bad_documents() {
        let m = Model::fit(&gauss(25, 7), ModelParams::default()).unwrap();
        let text = m.save().unwrap();
        let renamed = text.replacen("\"alpha\"", "\"alpah\"", 1);
        let msg = Model::load(&renamed).unwrap_err().to_string();
        assert!(msg.contains("alpah"), "{msg}");
        let bumped = text.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
        assert!(matches!(
            Model::load(&bumped),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
        let truncated = &text[..text.len() / 2];
        assert!(matches!(Model::load(truncated), Err(Error::Schema(_))));
    }
}
