use super::*;
use crate::batchref::solve_batch;
use crate::kernel::{CovarianceMode, KernelSpec};

fn linear_cache(points: &[[f64; 2]]) -> GramCache {
    let pts: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
    GramCache::with_basis(KernelSpec::linear(), 0.0, CovarianceMode::Frozen, &pts).unwrap()
}

fn build(
    points: &[[f64; 2]],
    c: f64,
    alpha: &[f64],
    rho: f64,
    margin: &[usize],
    bound: &[usize],
    rest: &[usize],
) -> (GramCache, SolverState) {
    let gram = linear_cache(points);
    let state = SolverState::from_parts(
        &gram,
        alpha.to_vec(),
        rho,
        margin,
        bound,
        rest,
        SolverParams::with_c(c),
    )
    .unwrap();
    (gram, state)
}

/// Appends `x` with `a = 0` in `R` without driving it.
fn stage(state: &mut SolverState, gram: &mut GramCache, x: [f64; 2]) -> usize {
    gram.extend(&x).unwrap();
    state.alpha.push(0.0);
    state.sets.push(PointSet::Rest);
    state.grad.push(0.0);
    state.recompute_gradient(gram);
    state.len() - 1
}

fn ring(n: usize, seed: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let t = i as f64 * 0.61 + seed;
            let r = 1.0 + 0.3 * (3.7 * t).sin();
            vec![r * t.cos(), r * t.sin() + 0.2 * (1.3 * t).cos()]
        })
        .collect()
}

fn seeded(points: &[Vec<f64>], warmup: usize, eta: f64, c: f64) -> (GramCache, SolverState) {
    let gram = GramCache::with_basis(
        KernelSpec::rbf(0.5),
        eta,
        CovarianceMode::Frozen,
        &points[..warmup],
    )
    .unwrap();
    let sol = solve_batch(&gram.modified_gram(), c, 1e-12).unwrap();
    let state = SolverState::from_batch(&gram, &sol, SolverParams::with_c(c)).unwrap();
    (gram, state)
}

#[test]
fn gradient_of_balanced_pair_is_zero() {
    let (gram, state) = build(
        &[[1.0, 0.0], [0.0, 1.0]],
        1.0,
        &[0.5, 0.5],
        0.5,
        &[0, 1],
        &[],
        &[],
    );
    assert_eq!(state.gradient(&gram), vec![0.0, 0.0]);
    assert_eq!(state.kkt_residual(&gram), 0.0);
}

#[test]
fn perturbed_pair_violates_kkt() {
    let (gram, state) = build(
        &[[1.0, 0.0], [0.0, 1.0]],
        1.0,
        &[0.6, 0.4],
        0.5,
        &[0, 1],
        &[],
        &[],
    );
    let g = state.gradient(&gram);
    assert!((g[0] - 0.1).abs() < 1e-15 && (g[1] + 0.1).abs() < 1e-15);
    assert!((state.kkt_residual(&gram) - 0.1).abs() < 1e-15);
}

#[test]
fn rest_violator_residual() {
    let (gram, state) = build(
        &[[1.0, 0.0], [0.8, 0.0]],
        1.0,
        &[1.0, 0.0],
        1.0,
        &[0],
        &[],
        &[1],
    );
    assert!((state.kkt_residual(&gram) - 0.2).abs() < 1e-12);
    let k = gram.modified_gram();
    assert_eq!(state.kkt_residual_dense(&k), state.kkt_residual(&gram));
}

#[test]
fn constraint_violation_reported() {
    let (_, state) = build(
        &[[1.0, 0.0], [0.0, 1.0]],
        1.0,
        &[0.6, 0.6],
        0.5,
        &[0, 1],
        &[],
        &[],
    );
    assert!(matches!(
        state.check_constraints(),
        Err(Error::ConstraintViolation { .. })
    ));
}

#[test]
fn from_parts_rejects_bad_partitions() {
    let gram = linear_cache(&[[1.0, 0.0], [0.0, 1.0]]);
    let p = SolverParams::with_c(1.0);
    let dup = SolverState::from_parts(&gram, vec![0.5, 0.5], 0.5, &[0, 1], &[1], &[], p);
    assert!(matches!(dup, Err(Error::Schema(_))));
    let missing = SolverState::from_parts(&gram, vec![0.5, 0.5], 0.5, &[0], &[], &[], p);
    assert!(matches!(missing, Err(Error::Schema(_))));
    let range = SolverState::from_parts(&gram, vec![0.5, 0.5], 0.5, &[0, 7], &[], &[1], p);
    assert!(matches!(range, Err(Error::Schema(_))));
}

#[test]
fn singleton_sensitivity_closed_form() {
    let (mut gram, mut state) = build(
        &[[1.0, 0.0], [0.0, 0.5]],
        1.0,
        &[1.0, 0.0],
        1.0,
        &[0],
        &[],
        &[1],
    );
    let c = stage(&mut state, &mut gram, [-0.5, 0.3]);
    let sens = state.sensitivity(&gram, c).unwrap();
    let kss = gram.modified(0, 0);
    let ksc = gram.modified(0, c);
    assert!((sens.beta[0] - (kss - ksc)).abs() < 1e-15);
    assert_eq!(sens.beta[1], -1.0);
    // gamma_c = |x_c - x_s|^2 for a linear kernel with a single margin point
    assert!((sens.gamma[c] - (1.5f64.powi(2) + 0.3f64.powi(2))).abs() < 1e-14);
}

#[test]
fn small_step_keeps_margin_on_margin() {
    let (mut gram, mut state) = build(
        &[[1.0, 0.0], [0.0, 0.5]],
        1.0,
        &[1.0, 0.0],
        1.0,
        &[0],
        &[],
        &[1],
    );
    let c = stage(&mut state, &mut gram, [-0.5, 0.3]);
    let sens = state.sensitivity(&gram, c).unwrap();
    state.apply_drive_step(c, 1e-6, &sens);
    let exact = state.gradient(&gram);
    assert!(exact[0].abs() < 1e-15);
    assert!((state.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    for i in [1, c] {
        assert!((exact[i] - state.grad[i]).abs() < 1e-15);
    }
}

/// `E = {0}` at `C = 0.5`, `S = {1}`, new point at `(-2, 0)`:
/// `g_c = -1.5`, `gamma_c = 9`, `gamma_0 = 3`, `g_0 = -0.5`.
fn limit_fixture(alpha_s: f64) -> (GramCache, SolverState, usize) {
    let (mut gram, mut state) = build(
        &[[0.0, 0.0], [1.0, 0.0]],
        0.5,
        &[0.5, alpha_s],
        0.5,
        &[1],
        &[0],
        &[],
    );
    let c = stage(&mut state, &mut gram, [-2.0, 0.0]);
    (gram, state, c)
}

#[test]
fn limit_step_tie_prefers_new_to_s() {
    let (gram, state, c) = limit_fixture(0.5);
    assert!((state.grad[c] + 1.5).abs() < 1e-15);
    let sens = state.sensitivity(&gram, c).unwrap();
    assert!((sens.gamma[c] - 9.0).abs() < 1e-14);
    assert!((sens.gamma[0] - 3.0).abs() < 1e-14);
    let (step, ev) = state.limit_step(c, 1.0, &sens).unwrap();
    assert_eq!(ev.kind, MigrationKind::NewToS);
    assert_eq!(ev.index, c);
    assert!((step - 1.0 / 6.0).abs() < 1e-14);
}

#[test]
fn limit_step_new_to_e() {
    let (gram, mut state, c) = limit_fixture(0.5);
    state.alpha[c] = 0.49;
    let sens = state.sensitivity(&gram, c).unwrap();
    let (step, ev) = state.limit_step(c, 1.0, &sens).unwrap();
    assert_eq!(ev.kind, MigrationKind::NewToE);
    assert!((step - 0.01).abs() < 1e-15);
}

#[test]
fn limit_step_s_to_r() {
    // g_c = -0.6 puts the margin hit at 1/15, after a_1 = 0.05 runs out
    let (gram, state, c) = limit_fixture(0.05);
    let sens = state.sensitivity(&gram, c).unwrap();
    let (step, ev) = state.limit_step(c, 1.0, &sens).unwrap();
    assert_eq!((ev.kind, ev.index), (MigrationKind::SToR, 1));
    assert!((step - 0.05).abs() < 1e-15);
}

#[test]
fn limit_step_negative_direction() {
    // a_1 has room 0.1 to grow, a_c only 0.05 to shrink
    let (gram, mut state, c) = limit_fixture(0.4);
    state.alpha[c] = 0.05;
    let sens = state.sensitivity(&gram, c).unwrap();
    let (step, ev) = state.limit_step(c, -1.0, &sens).unwrap();
    assert_eq!(ev.kind, MigrationKind::NewToR);
    assert!((step - 0.05).abs() < 1e-15);
}

#[test]
fn empty_margin_shifts_rho_to_bound_point() {
    let (mut gram, mut state) = build(
        &[[1.0, 0.0], [0.0, 0.8]],
        0.5,
        &[0.5, 0.5],
        0.2,
        &[],
        &[0, 1],
        &[],
    );
    let c = stage(&mut state, &mut gram, [0.2, 0.0]);
    let ev = state.empty_s_step(&gram, c, 1.0).unwrap();
    assert_eq!(
        ev,
        MigrationEvent {
            kind: MigrationKind::EmptySRhoShift,
            index: 0,
            step: 0.0
        }
    );
    assert_eq!(state.rho, 0.5);
    assert_eq!(state.set_of(0), PointSet::Margin);
    assert_eq!(state.margin(), &[0]);
    assert!((state.grad[1] + 0.18).abs() < 1e-15);
    assert!((state.grad[c] + 0.4).abs() < 1e-15);
}

#[test]
fn empty_margin_downward_shift_picks_new_point() {
    let (mut gram, mut state) = build(
        &[[1.0, 0.0], [0.0, 1.0]],
        1.0,
        &[1.0, 0.0],
        0.5,
        &[],
        &[0],
        &[1],
    );
    let c = stage(&mut state, &mut gram, [0.4, 0.0]);
    let ev = state.empty_s_step(&gram, c, -1.0).unwrap();
    // (K a)_c = 0.4 is above (K a)_1 = 0, so the rest point wins
    assert_eq!(ev.index, 1);
    assert_eq!(state.rho, 0.0);
    let mut fresh = state.clone();
    fresh.qinv = BorderedInverse::new();
    fresh.sets[1] = PointSet::Rest;
    fresh.rho = 0.5;
    fresh.recompute_gradient(&gram);
    let ev = fresh.empty_s_step(&gram, 0, 1.0).unwrap();
    assert_eq!(ev.index, 0);
}

#[test]
fn empty_s_step_requires_empty_margin() {
    let (mut gram, mut state) = build(
        &[[1.0, 0.0], [0.0, 1.0]],
        1.0,
        &[0.5, 0.5],
        0.5,
        &[0, 1],
        &[],
        &[],
    );
    let c = stage(&mut state, &mut gram, [0.0, 0.0]);
    assert!(state.empty_s_step(&gram, c, 1.0).is_err());
}

#[test]
fn duplicate_of_rest_point_joins_rest() {
    let pts = ring(30, 0.0);
    let (mut gram, mut state) = seeded(&pts, 30, 0.3, 0.1);
    let r = state.rest()[0];
    let before_alpha = state.alpha.clone();
    let before_rho = state.rho;
    let x = gram.points()[r].clone();
    let trace = state.add_point(&mut gram, &x, &mut |_, _| {}).unwrap();
    assert_eq!(
        trace,
        vec![MigrationEvent {
            kind: MigrationKind::NewToR,
            index: 30,
            step: 0.0
        }]
    );
    assert_eq!(&state.alpha[..30], &before_alpha[..]);
    assert_eq!(state.alpha[30], 0.0);
    assert_eq!(state.rho, before_rho);
}

#[test]
fn far_outlier_matches_batch() {
    let pts = ring(25, 0.4);
    let (mut gram, mut state) = seeded(&pts, 25, 0.5, 0.1);
    let trace = state
        .add_point(&mut gram, &[50.0, 50.0], &mut |_, _| {})
        .unwrap();
    assert!(!trace.is_empty());
    assert_ne!(state.set_of(25), PointSet::Rest);
    state.check_constraints().unwrap();
    assert!(state.kkt_residual(&gram) <= 1e-6);
    let oracle = solve_batch(&gram.modified_gram(), 0.1, 1e-12).unwrap();
    assert!((state.objective(&gram) - oracle.objective).abs() <= 1e-8);
}

#[test]
fn streaming_matches_batch_and_keeps_invariants() {
    let pts = ring(80, 1.1);
    let (mut gram, mut state) = seeded(&pts, 20, 0.7, 0.1);
    for p in &pts[20..] {
        let mut bad = None;
        let mut check = |s: &SolverState, ev: &MigrationEvent| {
            let sum: f64 = s.alpha.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                bad = Some(format!("{ev:?}: sum {sum}"));
            }
        };
        state.add_point(&mut gram, p, &mut check).unwrap();
        assert_eq!(bad, None);
        state.check_constraints().unwrap();
        assert!(state.kkt_residual(&gram) <= 1e-6);
        assert!(state.qinv.residual(&gram) <= 1e-8);
    }
    let oracle = solve_batch(&gram.modified_gram(), 0.1, 1e-12).unwrap();
    let rel = (state.objective(&gram) - oracle.objective).abs() / oracle.objective.abs().max(1.0);
    assert!(rel <= 1e-8, "relative objective gap {rel:e}");
}

#[test]
fn full_mode_repairs_after_every_insertion() {
    let pts = ring(40, 2.0);
    let mut gram =
        GramCache::with_basis(KernelSpec::rbf(0.5), 0.4, CovarianceMode::Full, &pts[..20]).unwrap();
    let sol = solve_batch(&gram.modified_gram(), 0.1, 1e-12).unwrap();
    let mut state = SolverState::from_batch(&gram, &sol, SolverParams::with_c(0.1)).unwrap();
    for p in &pts[20..] {
        state.add_point(&mut gram, p, &mut |_, _| {}).unwrap();
        assert!(state.kkt_residual(&gram) <= 1e-6);
        let objs = state.repair_objectives();
        for w in objs.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "repair objective rose: {w:?}");
        }
    }
    let oracle = solve_batch(&gram.modified_gram(), 0.1, 1e-12).unwrap();
    assert!((state.objective(&gram) - oracle.objective).abs() <= 1e-8);
}

#[test]
fn batch_fallback_restores_kkt() {
    let pts = ring(30, 0.2);
    let (mut gram, mut state) = seeded(&pts, 20, 0.3, 0.1);
    for p in &pts[20..29] {
        state.add_point(&mut gram, p, &mut |_, _| {}).unwrap();
    }
    gram.extend(&pts[29]).unwrap();
    state.alpha.push(0.0);
    state.sets.push(PointSet::Rest);
    state.grad.push(0.0);
    state.batch_fallback(&gram).unwrap();
    assert_eq!(state.stats().fallbacks, 1);
    assert!(state.kkt_residual(&gram) <= 1e-6);
}

#[test]
fn candidate_tie_rule() {
    let a = Candidate {
        step: 0.5,
        kind: MigrationKind::SToR,
        index: 0,
    };
    let b = Candidate {
        step: 0.5 + 1e-15,
        kind: MigrationKind::NewToS,
        index: 9,
    };
    assert!(b.beats(&a));
    let c = Candidate {
        step: 0.5,
        kind: MigrationKind::RToS,
        index: 3,
    };
    assert!(a.beats(&c));
    let d = Candidate {
        step: 0.4,
        kind: MigrationKind::RToS,
        index: 3,
    };
    assert!(d.beats(&b));
}

#[test]
fn add_point_rejects_mismatched_cache() {
    let pts = ring(22, 0.0);
    let (mut gram, mut state) = seeded(&pts, 20, 0.3, 0.1);
    gram.extend(&pts[20]).unwrap();
    assert!(matches!(
        state.add_point(&mut gram, &pts[21], &mut |_, _| {}),
        Err(Error::DimensionMismatch { .. })
    ));
}

fn assert_sound(state: &SolverState, gram: &GramCache) {
    let c = state.params().c;
    assert!(
        state.alpha().iter().all(|&a| (0.0..=c).contains(&a)),
        "{:?}",
        state.alpha()
    );
    state.check_constraints().unwrap();
    assert!(
        state.kkt_residual(gram) <= 1e-9,
        "kkt {}",
        state.kkt_residual(gram)
    );
    assert!(
        state.qinv().residual(gram) <= 1e-8,
        "qinv residual {:e}",
        state.qinv().residual(gram)
    );
}

#[test]
fn rank_deficient_seed_keeps_margin_independent() {
    // a linear kernel in 2-D has rank 2; the zeros have all-zero rows
    let pts = [
        [0.0, -1.0],
        [-2.8, 1.3],
        [-2.4, 1.0],
        [0.0, 0.0],
        [0.0, 0.0],
        [0.0, 0.0],
        [0.0, 2.9],
        [0.0, 0.0],
        [2.0, -0.8],
    ];
    let gram = linear_cache(&pts);
    let batch = solve_batch(&gram.modified_gram(), 0.2, 1e-13).unwrap();
    let state = SolverState::from_batch(&gram, &batch, SolverParams::with_c(0.2)).unwrap();
    assert_sound(&state, &gram);
    assert!(state.margin().len() <= 3, "{:?}", state.margin());
    assert!((state.objective(&gram) - batch.objective).abs() <= 1e-12);
}

#[test]
fn duplicates_in_full_mode_stay_finite() {
    let pts: Vec<Vec<f64>> = [
        [0.0, -1.0],
        [-2.8, 1.3],
        [0.0, 0.0],
        [0.0, 0.0],
        [0.0, 2.9],
        [2.0, -0.8],
    ]
    .iter()
    .map(|p| p.to_vec())
    .collect();
    let mut gram =
        GramCache::with_basis(KernelSpec::linear(), 0.95, CovarianceMode::Full, &pts).unwrap();
    let batch = solve_batch(&gram.modified_gram(), 0.2, 1e-13).unwrap();
    let mut state = SolverState::from_batch(&gram, &batch, SolverParams::with_c(0.2)).unwrap();
    for x in [
        [0.0, 2.2],
        [0.0, 0.0],
        [0.0, -2.95],
        [0.0, 0.0],
        [1.8, 1.9],
        [0.0, 0.0],
    ] {
        state.add_point(&mut gram, &x, &mut |_, _| {}).unwrap();
        assert_sound(&state, &gram);
    }
    let oracle = solve_batch(&gram.modified_gram(), 0.2, 1e-13).unwrap();
    assert!((state.objective(&gram) - oracle.objective).abs() <= 1e-9);
}

#[test]
fn from_parts_rejects_dependent_margin_set() {
    let gram = linear_cache(&[[1.0, 1.0], [1.0, 1.0], [0.0, 2.0]]);
    let err = SolverState::from_parts(
        &gram,
        vec![0.3, 0.3, 0.4],
        1.0,
        &[0, 1, 2],
        &[],
        &[],
        SolverParams::with_c(0.5),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Schema(_)), "{err:?}");
}
