//! Joint maximum-likelihood position estimation.
//!
//! The model is linearised at the current iterate and the Λ-weighted normal
//! equations are solved for the increment (a raw Gauss-Newton step, no damping
//! and no line search). `solve` applies a fixed number of steps.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::channel::{ChannelParams, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::jacobian::assemble;
use crate::observation::{forward_model, ObservationLayout, ObservationSet, RowKind};
use crate::scenario::{PositionVector, ReferenceLayout};

/// Normal matrices with a larger condition number are rejected.
pub const MAX_CONDITION: f64 = 1e12;
/// `converged` is reported when the last step is shorter than this.
pub const CONVERGED_STEP_M: f64 = 1e-4;
/// The safety box is this many times the reference footprint.
pub const SAFETY_BOX_FACTOR: f64 = 10.0;

/// Zero variances (noiseless runs) are floored to keep `Λ⁻¹` finite. With
/// noiseless data any positive weighting has the truth as its fixed point.
const TOA_VARIANCE_FLOOR: f64 = (1e-3 / SPEED_OF_LIGHT) * (1e-3 / SPEED_OF_LIGHT);
const RSS_VARIANCE_FLOOR: f64 = 1e-6;

pub(crate) fn effective_variance(row: &RowKind, var: f64) -> f64 {
    let floor = match row {
        RowKind::Toa { .. } => TOA_VARIANCE_FLOOR,
        _ => RSS_VARIANCE_FLOOR,
    };
    var.max(floor)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateState {
    pub positions: PositionVector,
    pub iteration: usize,
    pub converged: bool,
    pub last_step_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub state: EstimateState,
    pub step_norms: Vec<f64>,
    /// Condition number of `GᵀΛ⁻¹G` at the last linearisation point.
    pub condition: f64,
}

/// Weighted least-squares increment `(GᵀWG)⁻¹ GᵀW r` with `W = diag(1/var)`.
///
/// Solved through an SVD of the whitened matrix `W^{1/2} G`, never by forming
/// an explicit inverse. Returns the increment and the condition number of the
/// normal matrix (the squared condition number of the whitened matrix).
pub fn weighted_increment(
    g: &DMatrix<f64>,
    residual: &DVector<f64>,
    variances: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    if g.nrows() != residual.len() || g.nrows() != variances.len() {
        return Err(Error::Domain(
            "jacobian, residual and variance sizes differ".into(),
        ));
    }
    if variances.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Domain("variances must be strictly positive".into()));
    }
    let w = variances.map(|v| 1.0 / v.sqrt());
    let mut gw = g.clone();
    for (k, mut row) in gw.row_iter_mut().enumerate() {
        row *= w[k];
    }
    let rw = residual.component_mul(&w);
    if gw.nrows() < gw.ncols() {
        return Err(Error::Singular {
            condition: f64::INFINITY,
        });
    }
    let svd = gw.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 {
        (smax / smin).powi(2)
    } else {
        f64::INFINITY
    };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let delta = svd
        .solve(&rw, 0.0)
        .map_err(|e| Error::Domain(e.to_string()))?;
    Ok((delta, condition))
}

fn active_variances(obs: &ObservationSet) -> DVector<f64> {
    DVector::from_iterator(
        obs.layout.len(),
        obs.layout
            .rows()
            .iter()
            .zip(obs.variances.iter())
            .map(|(r, v)| effective_variance(r, *v)),
    )
}

fn step_compacted(
    current: &PositionVector,
    obs: &ObservationSet,
    variances: &DVector<f64>,
    refs: &ReferenceLayout,
    params: &ChannelParams,
) -> Result<(PositionVector, f64, f64)> {
    let f = forward_model(current, &obs.layout, refs, params)?;
    let g = assemble(current, &obs.layout, refs, params)?;
    let (delta, condition) = weighted_increment(&g.matrix, &(&obs.values - f), variances)?;
    let next = PositionVector::from_stacked(&(current.stacked() + &delta))?;
    Ok((next, delta.norm(), condition))
}

/// One Gauss-Newton step from `current`; masked rows are ignored.
pub fn gn_step(
    current: &PositionVector,
    obs: &ObservationSet,
    refs: &ReferenceLayout,
    params: &ChannelParams,
) -> Result<PositionVector> {
    let obs = obs.compacted();
    let var = active_variances(&obs);
    Ok(step_compacted(current, &obs, &var, refs, params)?.0)
}

/// Apply exactly `iterations` Gauss-Newton steps from `init`.
pub fn solve(
    init: &PositionVector,
    obs: &ObservationSet,
    refs: &ReferenceLayout,
    params: &ChannelParams,
    iterations: usize,
) -> Result<SolveReport> {
    if iterations < 1 {
        return Err(Error::Domain("iteration count must be >= 1".into()));
    }
    let obs = obs.compacted();
    let var = active_variances(&obs);
    let (x0, y0, x1, y1) = refs.bounding_box();
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let half = SAFETY_BOX_FACTOR * (x1 - x0).max(y1 - y0) / 2.0;

    let mut current = init.clone();
    let mut step_norms = Vec::with_capacity(iterations);
    let mut condition = f64::NAN;
    for it in 0..iterations {
        let (next, norm, cond) = step_compacted(&current, &obs, &var, refs, params)?;
        if let Some((x, y)) = next.nodes().find(|(x, y)| {
            (x - cx).abs() > half || (y - cy).abs() > half || !x.is_finite() || !y.is_finite()
        }) {
            return Err(Error::Divergence {
                iteration: it + 1,
                x,
                y,
            });
        }
        current = next;
        step_norms.push(norm);
        condition = cond;
    }
    let last = *step_norms.last().unwrap_or(&0.0);
    Ok(SolveReport {
        state: EstimateState {
            positions: current,
            iteration: iterations,
            converged: last < CONVERGED_STEP_M,
            last_step_norm: last,
        },
        step_norms,
        condition,
    })
}

/// Weighted squared residual `(r − f)ᵀ Λ⁻¹ (r − f)` over unmasked rows.
pub fn objective(
    pos: &PositionVector,
    obs: &ObservationSet,
    refs: &ReferenceLayout,
    params: &ChannelParams,
) -> Result<f64> {
    let obs = obs.compacted();
    let var = active_variances(&obs);
    let f = forward_model(pos, &obs.layout, refs, params)?;
    Ok((&obs.values - f)
        .iter()
        .zip(var.iter())
        .map(|(r, v)| r * r / v)
        .sum())
}

/// `GᵀΛ⁻¹G` for `layout` at `pos`, using the channel's variances.
pub fn normal_matrix(
    pos: &PositionVector,
    layout: &ObservationLayout,
    refs: &ReferenceLayout,
    params: &ChannelParams,
) -> Result<DMatrix<f64>> {
    let g = assemble(pos, layout, refs, params)?.matrix;
    let var = crate::observation::build_covariance(layout, params);
    let mut weighted = g.clone();
    for (k, mut row) in weighted.row_iter_mut().enumerate() {
        row /= effective_variance(&layout.rows()[k], var[k]);
    }
    Ok(g.transpose() * weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::{build_covariance, synthesize};
    use crate::scenario::Scheme;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noiseless_obs(
        truth: &PositionVector,
        scheme: Scheme,
        refs: &ReferenceLayout,
        params: &ChannelParams,
    ) -> ObservationSet {
        let l = ObservationLayout::new(scheme, truth.len(), refs.len());
        let f = forward_model(truth, &l, refs, params).unwrap();
        ObservationSet::new(f, l.clone(), build_covariance(&l, params)).unwrap()
    }

    #[test]
    fn truth_is_a_fixed_point() {
        let refs = ReferenceLayout::corners(50.0);
        let p = ChannelParams::clear();
        let truth =
            PositionVector::from_points(&[(20.0, 30.0), (21.0, 30.0), (20.0, 31.0)]).unwrap();
        let obs = noiseless_obs(&truth, Scheme::Cotar, &refs, &p);
        let next = gn_step(&truth, &obs, &refs, &p).unwrap();
        for (a, b) in next.nodes().zip(truth.nodes()) {
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        }
    }

    #[test]
    fn affine_model_reaches_optimum_in_one_step() {
        // r = A θ + b + noise; one increment from any start hits the WLS optimum.
        let a =
            DMatrix::from_row_slice(5, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 1.0, 0.2, -0.7, 1.5, 1.5]);
        let b = DVector::from_column_slice(&[0.1, -0.2, 0.3, 0.0, 1.0]);
        let r = DVector::from_column_slice(&[1.0, 2.0, -1.0, 0.5, 4.0]);
        let var = DVector::from_column_slice(&[1.0, 4.0, 0.25, 2.0, 1.0]);
        let start = DVector::from_column_slice(&[100.0, -40.0]);
        let (delta, _) = weighted_increment(&a, &(&r - (&a * &start + &b)), &var).unwrap();
        let theta = start + delta;

        let winv = DMatrix::from_diagonal(&var.map(|v| 1.0 / v));
        let normal = a.transpose() * &winv * &a;
        let optimum = normal.try_inverse().unwrap() * a.transpose() * &winv * (&r - &b);
        assert_relative_eq!(theta, optimum, max_relative = 1e-10);
    }

    #[test]
    fn increment_matches_closed_form() {
        let refs = ReferenceLayout::corners(50.0);
        let p = ChannelParams::clear();
        let truth = PositionVector::from_points(&[(20.0, 30.0), (21.0, 30.5)]).unwrap();
        let l = ObservationLayout::new(Scheme::Cotar, 2, 4);
        let obs = synthesize(
            &truth,
            &l,
            &refs,
            &p,
            0.0,
            &mut ChaCha8Rng::seed_from_u64(3),
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let start = truth.translated(3.0, -2.0);
        let next = gn_step(&start, &obs, &refs, &p).unwrap();

        let g = assemble(&start, &l, &refs, &p).unwrap().matrix;
        let resid = &obs.values - forward_model(&start, &l, &refs, &p).unwrap();
        let linv = DMatrix::from_diagonal(&obs.variances.map(|v| 1.0 / v));
        let expected = start.stacked()
            + (g.transpose() * &linv * &g).try_inverse().unwrap() * g.transpose() * &linv * resid;
        assert_relative_eq!(next.stacked(), expected, max_relative = 1e-10);
    }

    #[test]
    fn single_target_toa_converges_from_far_start() {
        let refs = ReferenceLayout::corners(50.0);
        let p = ChannelParams::clear();
        let truth = PositionVector::from_points(&[(25.0, 25.0)]).unwrap();
        let obs = noiseless_obs(&truth, Scheme::ToaOnly, &refs, &p);
        let init = PositionVector::from_points(&[(10.0, 40.0)]).unwrap();

        // Brute-force check that the truth minimises the objective on a 0.05 m grid.
        let best = (0..=400)
            .flat_map(|i| (0..=400).map(move |j| (15.0 + 0.05 * i as f64, 15.0 + 0.05 * j as f64)))
            .min_by(|a, b| {
                let qa = objective(
                    &PositionVector::from_points(&[*a]).unwrap(),
                    &obs,
                    &refs,
                    &p,
                )
                .unwrap();
                let qb = objective(
                    &PositionVector::from_points(&[*b]).unwrap(),
                    &obs,
                    &refs,
                    &p,
                )
                .unwrap();
                qa.total_cmp(&qb)
            })
            .unwrap();
        assert!((best.0 - 25.0).abs() < 1e-9 && (best.1 - 25.0).abs() < 1e-9);

        // Error after two steps computed independently with a plain least-squares
        // Gauss-Newton loop on unit range vectors.
        let rep = solve(&init, &obs, &refs, &p, 2).unwrap();
        let e2 = rep.state.positions.node_errors(&truth)[0];
        assert!((e2 - 3.418512e-3).abs() < 1e-8, "error {e2}");
        assert_eq!(rep.step_norms.len(), 2);
        assert_eq!(rep.state.iteration, 2);

        let e3 = solve(&init, &obs, &refs, &p, 3)
            .unwrap()
            .state
            .positions
            .node_errors(&truth)[0];
        assert!(e3 < 1e-9, "error {e3}");
    }

    #[test]
    fn solve_reports_convergence_flag_without_stopping_early() {
        let refs = ReferenceLayout::corners(50.0);
        let p = ChannelParams::clear();
        let truth = PositionVector::from_points(&[(12.0, 33.0)]).unwrap();
        let obs = noiseless_obs(&truth, Scheme::Hybrid, &refs, &p);
        let rep = solve(&truth, &obs, &refs, &p, 3).unwrap();
        assert_eq!(rep.step_norms.len(), 3);
        assert!(rep.state.converged);
        assert!(rep.condition >= 1.0);
    }

    #[test]
    fn collinear_references_with_lone_target_are_singular() {
        let refs = ReferenceLayout::from_points(&[(0.0, 0.0), (10.0, 0.0), (20.0, 0.0)]).unwrap();
        let p = ChannelParams::clear();
        let truth = PositionVector::from_points(&[(5.0, 0.0)]).unwrap();
        let obs = noiseless_obs(&truth, Scheme::ToaOnly, &refs, &p);
        let err = gn_step(&truth, &obs, &refs, &p).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }), "{err:?}");
    }

    #[test]
    fn zero_iterations_rejected() {
        let refs = ReferenceLayout::corners(50.0);
        let p = ChannelParams::clear();
        let truth = PositionVector::from_points(&[(12.0, 33.0)]).unwrap();
        let obs = noiseless_obs(&truth, Scheme::ToaOnly, &refs, &p);
        assert!(solve(&truth, &obs, &refs, &p, 0).is_err());
    }

    #[test]
    fn objective_zero_at_truth_and_nonnegative() {
        let refs = ReferenceLayout::corners(50.0);
        let p = ChannelParams::clear();
        let truth = PositionVector::from_points(&[(12.0, 33.0), (13.0, 33.0)]).unwrap();
        let obs = noiseless_obs(&truth, Scheme::Cotar, &refs, &p);
        assert_eq!(objective(&truth, &obs, &refs, &p).unwrap(), 0.0);
        assert!(objective(&truth.translated(1.0, 1.0), &obs, &refs, &p).unwrap() > 0.0);
    }

    #[test]
    fn decoupled_schemes_equal_independent_solves() {
        let refs = ReferenceLayout::corners(50.0);
        let p = ChannelParams::clear();
        let truth = PositionVector::from_points(&[(12.0, 33.0), (30.0, 18.0)]).unwrap();
        let l = ObservationLayout::new(Scheme::Hybrid, 2, 4);
        let obs = synthesize(
            &truth,
            &l,
            &refs,
            &p,
            0.0,
            &mut ChaCha8Rng::seed_from_u64(9),
            &mut ChaCha8Rng::seed_from_u64(10),
        )
        .unwrap();
        let init = PositionVector::from_points(&[(25.0, 25.0), (25.0, 25.0)]).unwrap();
        let joint = solve(&init, &obs, &refs, &p, 2).unwrap().state.positions;

        for node in 0..2 {
            // Split the joint observation set into the node's own rows.
            let own = ObservationLayout::new(Scheme::Hybrid, 1, 4);
            let pick: Vec<usize> = l
                .rows()
                .iter()
                .enumerate()
                .filter(|(_, r)| r.indices().0 == node)
                .map(|(k, _)| k)
                .collect();
            let vals = DVector::from_iterator(pick.len(), pick.iter().map(|&k| obs.values[k]));
            let single =
                ObservationSet::new(vals, own.clone(), build_covariance(&own, &p)).unwrap();
            let init1 = PositionVector::from_points(&[(25.0, 25.0)]).unwrap();
            let est = solve(&init1, &single, &refs, &p, 2)
                .unwrap()
                .state
                .positions;
            let (a, b) = (est.node(0), joint.node(node));
            assert_relative_eq!(a.0, b.0, epsilon = 1e-9);
            assert_relative_eq!(a.1, b.1, epsilon = 1e-9);
        }
    }

    #[test]
    fn divergence_is_reported() {
        // Every range reads 5 km inside a 50 m square: the first step leaves the box.
        let refs = ReferenceLayout::corners(50.0);
        let p = ChannelParams::clear();
        let l = ObservationLayout::new(Scheme::ToaOnly, 1, 4);
        let vals = DVector::repeat(4, 5000.0 / SPEED_OF_LIGHT);
        let obs = ObservationSet::new(vals, l.clone(), build_covariance(&l, &p)).unwrap();
        let init = PositionVector::from_points(&[(10.0, 20.0)]).unwrap();
        let err = solve(&init, &obs, &refs, &p, 3).unwrap_err();
        assert!(
            matches!(err, Error::Divergence { iteration: 1, .. }),
            "{err:?}"
        );
    }
}
