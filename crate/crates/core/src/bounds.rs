//! Fisher information, Cramér-Rao bounds and the RMS bound of the linearised
//! estimator.
//!
//! Observations are Gaussian with a position-independent diagonal covariance,
//! so the Fisher information of every scheme is `GᵀΛ⁻¹G` evaluated at the true
//! positions with that scheme's rows. The same matrix inverted is the
//! covariance `P` of one Gauss-Newton step taken at the truth.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::channel::ChannelParams;
use crate::error::{Error, Result};
use crate::estimator::{normal_matrix, weighted_increment, MAX_CONDITION};
use crate::jacobian::assemble;
use crate::observation::{build_covariance, forward_model, ObservationLayout};
use crate::scenario::{lattice_points, PositionVector, ReferenceLayout, Scheme, TargetCluster};

/// Symmetric `2N × 2N` Fisher information; columns `x₁ … x_N, y₁ … y_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    pub matrix: DMatrix<f64>,
}

impl FisherInfo {
    pub fn n_targets(&self) -> usize {
        self.matrix.nrows() / 2
    }

    /// Inverse Fisher information (the CRB matrix), or `Singular` when the
    /// variance is unbounded in some direction.
    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        let eig = self.matrix.clone().symmetric_eigen();
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::Singular { condition });
        }
        self.matrix
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(Error::Singular { condition })
    }
}

/// Fisher information of `layout`'s rows at the true positions.
pub fn fisher(
    pos: &PositionVector,
    layout: &ObservationLayout,
    refs: &ReferenceLayout,
    params: &ChannelParams,
) -> Result<FisherInfo> {
    let m = normal_matrix(pos, layout, refs, params)?;
    // Symmetrise away round-off from the product.
    let matrix = (&m + m.transpose()) * 0.5;
    Ok(FisherInfo { matrix })
}

/// Bound on the position-error standard deviation of node `node`:
/// `sqrt([I⁻¹]_{x,x} + [I⁻¹]_{y,y})`.
pub fn crb_std(fim: &FisherInfo, node: usize) -> Result<f64> {
    let n = fim.n_targets();
    if node >= n {
        return Err(Error::Domain(format!(
            "node {node} out of range for {n} targets"
        )));
    }
    let inv = fim.inverse()?;
    Ok((inv[(node, node)] + inv[(n + node, n + node)]).sqrt())
}

/// Per-node CRB standard deviations.
pub fn crb_per_node(fim: &FisherInfo) -> Result<Vec<f64>> {
    let n = fim.n_targets();
    let inv = fim.inverse()?;
    Ok((0..n)
        .map(|i| (inv[(i, i)] + inv[(n + i, n + i)]).sqrt())
        .collect())
}

/// Covariance `P = (GᵀΛ⁻¹G)⁻¹` of the linearised estimator at `pos`.
pub fn estimator_covariance(
    pos: &PositionVector,
    layout: &ObservationLayout,
    refs: &ReferenceLayout,
    params: &ChannelParams,
) -> Result<DMatrix<f64>> {
    fisher(pos, layout, refs, params)?.inverse()
}

/// RMS bound `ε = sqrt(tr(P) / N)` in meters.
pub fn rms_bound(
    pos: &PositionVector,
    layout: &ObservationLayout,
    refs: &ReferenceLayout,
    params: &ChannelParams,
) -> Result<f64> {
    let p = estimator_covariance(pos, layout, refs, params)?;
    Ok((p.trace() / pos.len() as f64).sqrt())
}

/// Mean error of one step linearised at `init` when the truth is `truth`:
/// `(GᵀΛ⁻¹G)⁻¹GᵀΛ⁻¹ (f(truth) − f(init) − G (truth − init))`, `G` at `init`.
pub fn linearization_bias(
    truth: &PositionVector,
    init: &PositionVector,
    layout: &ObservationLayout,
    refs: &ReferenceLayout,
    params: &ChannelParams,
) -> Result<DVector<f64>> {
    let g = assemble(init, layout, refs, params)?.matrix;
    let remainder = forward_model(truth, layout, refs, params)?
        - forward_model(init, layout, refs, params)?
        - &g * (truth.stacked() - init.stacked());
    let var = build_covariance(layout, params).map(|v| v.max(f64::MIN_POSITIVE));
    let var = DVector::from_iterator(
        var.len(),
        layout
            .rows()
            .iter()
            .zip(var.iter())
            .map(|(r, v)| crate::estimator::effective_variance(r, *v)),
    );
    Ok(weighted_increment(&g, &remainder, &var)?.0)
}

/// Everything the bounds module knows about one placement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub crb_std: Vec<f64>,
    pub eps: f64,
    #[serde(skip)]
    pub covariance: DMatrix<f64>,
    pub bias: Option<Vec<f64>>,
}

pub fn bounds_report(
    truth: &PositionVector,
    init: Option<&PositionVector>,
    layout: &ObservationLayout,
    refs: &ReferenceLayout,
    params: &ChannelParams,
) -> Result<BoundsReport> {
    let fim = fisher(truth, layout, refs, params)?;
    let p = fim.inverse()?;
    let n = truth.len();
    let crb = (0..n)
        .map(|i| (p[(i, i)] + p[(n + i, n + i)]).sqrt())
        .collect();
    let bias = match init {
        Some(init) => Some(
            linearization_bias(truth, init, layout, refs, params)?
                .iter()
                .copied()
                .collect(),
        ),
        None => None,
    };
    Ok(BoundsReport {
        crb_std: crb,
        eps: (p.trace() / n as f64).sqrt(),
        covariance: p,
        bias,
    })
}

// ---- grid maps --------------------------------------------------------------

/// Inputs for a bounds map over `[0, L]²`.
#[derive(Debug, Clone)]
pub struct MapSpec {
    pub area_side_m: f64,
    pub references: ReferenceLayout,
    /// Cooperative formation, used by schemes with neighbor rows. Schemes
    /// without coupling rows are evaluated for a single node at each point.
    pub formation: Vec<(f64, f64)>,
    pub params: ChannelParams,
    pub condition: String,
    pub pitch_m: f64,
}

impl MapSpec {
    pub fn formation_for(&self, scheme: Scheme) -> Vec<(f64, f64)> {
        if scheme.uses_neighbor_rss() {
            self.formation.clone()
        } else {
            vec![(0.0, 0.0)]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Mean of the per-node CRB standard deviations.
    Crb,
    /// `sqrt(tr(P)/N)`.
    Eps,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Crb => "crb",
            Metric::Eps => "eps",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapCell {
    pub x: f64,
    pub y: f64,
    pub scheme: Scheme,
    pub condition: String,
    pub metric: Metric,
    /// `NaN` where the geometry is degenerate or the bound is unbounded.
    pub value_m: f64,
}

/// Bound values at the cluster centroid `point` (`crb`, `eps`).
pub fn bounds_at(spec: &MapSpec, scheme: Scheme, point: (f64, f64)) -> Result<(f64, f64)> {
    let formation = spec.formation_for(scheme);
    let pos = TargetCluster::centered_on(formation, point).positions();
    let layout = ObservationLayout::new(scheme, pos.len(), spec.references.len());
    let fim = fisher(&pos, &layout, &spec.references, &spec.params)?;
    let p = fim.inverse()?;
    let n = pos.len();
    let crb = (0..n)
        .map(|i| (p[(i, i)] + p[(n + i, n + i)]).sqrt())
        .sum::<f64>()
        / n as f64;
    Ok((crb, (p.trace() / n as f64).sqrt()))
}

/// Lattice points used by [`crb_map`] for `scheme`.
pub fn map_points(spec: &MapSpec, scheme: Scheme) -> Vec<(f64, f64)> {
    lattice_points(spec.area_side_m, spec.pitch_m, &spec.formation_for(scheme))
}

/// Both metrics at every lattice point, in lattice order (`crb` then `eps` per point).
pub fn crb_map(spec: &MapSpec, scheme: Scheme) -> Vec<MapCell> {
    map_points(spec, scheme)
        .par_iter()
        .map(|&pt| {
            let (crb, eps) = bounds_at(spec, scheme, pt).unwrap_or((f64::NAN, f64::NAN));
            let cell = |metric, value_m| MapCell {
                x: pt.0,
                y: pt.1,
                scheme,
                condition: spec.condition.clone(),
                metric,
                value_m,
            };
            [cell(Metric::Crb, crb), cell(Metric::Eps, eps)]
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// CSV with columns `x,y,scheme,condition,metric,value_m`.
pub fn write_map_csv<W: Write>(cells: &[MapCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["x", "y", "scheme", "condition", "metric", "value_m"])
        .map_err(io)?;
    for c in cells {
        w.write_record([
            c.x.to_string(),
            c.y.to_string(),
            c.scheme.name().to_string(),
            c.condition.clone(),
            c.metric.name().to_string(),
            c.value_m.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
