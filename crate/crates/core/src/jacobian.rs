//! Analytic Jacobian `G = ∂f/∂(x, y)` of the observation model.
//!
//! Columns are `x₁ … x_N, y₁ … y_N`; rows follow [`ObservationLayout`]. The
//! blocks are neighbor RSS (four nonzeros per row), TOA and remote RSS (two
//! nonzeros per row, block-diagonal per target).
//!
//! Signs follow the calculus: `∂‖u − v‖/∂u = (u − v)/‖u − v‖`. The RSS slope
//! constant is `10η / ln 10`, the derivative of `10η log10(d)` with respect to
//! `ln d`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::channel::{ChannelParams, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::observation::{describe_pair, row_endpoints, ObservationLayout, RowKind};
use crate::scenario::{PositionVector, ReferenceLayout};

/// Distances below this are treated as coincident nodes.
pub const DEGENERATE_DISTANCE_M: f64 = 1e-6;
/// Distances below this are flagged: RSS gradients grow like `1/d`.
pub const NEAR_DEGENERATE_DISTANCE_M: f64 = 0.1;

/// `10 η / ln 10`, in dB per unit of ln(distance).
pub fn rss_slope(eta: f64) -> f64 {
    10.0 * eta / std::f64::consts::LN_10
}

/// Assembled Jacobian plus a list of rows whose endpoints are closer than
/// [`NEAR_DEGENERATE_DISTANCE_M`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobianMatrix {
    #[serde(skip)]
    pub matrix: DMatrix<f64>,
    pub rows: Vec<RowKind>,
    pub near_degenerate: Vec<usize>,
}

impl JacobianMatrix {
    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Gradient of one row with respect to its endpoints' coordinates.
///
/// Returns `(distance, (∂/∂x_a, ∂/∂y_a))`; for neighbor rows the derivative
/// with respect to the second target is the negative.
fn row_gradient(
    row: &RowKind,
    pos: &PositionVector,
    refs: &ReferenceLayout,
    params: &ChannelParams,
) -> Result<(f64, (f64, f64))> {
    let (a, b) = row_endpoints(row, pos, refs);
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    let d = dx.hypot(dy);
    if d < DEGENERATE_DISTANCE_M {
        return Err(Error::DegenerateGeometry {
            what: describe_pair(row),
            distance: d,
        });
    }
    let grad = match row {
        RowKind::Toa { .. } => {
            let s = 1.0 / (SPEED_OF_LIGHT * d);
            (dx * s, dy * s)
        }
        _ => {
            let s = rss_slope(params.eta) / (d * d);
            (dx * s, dy * s)
        }
    };
    Ok((d, grad))
}

fn fill_rows(
    rows: &[RowKind],
    pos: &PositionVector,
    refs: &ReferenceLayout,
    params: &ChannelParams,
) -> Result<JacobianMatrix> {
    let n = pos.len();
    let mut g = DMatrix::zeros(rows.len(), 2 * n);
    let mut near = Vec::new();
    for (k, row) in rows.iter().enumerate() {
        let (d, (gx, gy)) = row_gradient(row, pos, refs, params)?;
        if d < NEAR_DEGENERATE_DISTANCE_M {
            near.push(k);
        }
        match *row {
            RowKind::NeighborRss { p, q } => {
                g[(k, p)] = gx;
                g[(k, q)] = -gx;
                g[(k, n + p)] = gy;
                g[(k, n + q)] = -gy;
            }
            RowKind::Toa { target, .. } | RowKind::RemoteRss { target, .. } => {
                g[(k, target)] = gx;
                g[(k, n + target)] = gy;
            }
        }
    }
    Ok(JacobianMatrix {
        matrix: g,
        rows: rows.to_vec(),
        near_degenerate: near,
    })
}

/// Block A: one row per target pair `p < q`.
pub fn neighbor_rss_rows(pos: &PositionVector, params: &ChannelParams) -> Result<DMatrix<f64>> {
    let n = pos.len();
    let rows: Vec<RowKind> = (0..n)
        .flat_map(|p| ((p + 1)..n).map(move |q| RowKind::NeighborRss { p, q }))
        .collect();
    // No reference rows are evaluated; any valid layout satisfies the signature.
    let refs = ReferenceLayout::corners(1.0);
    Ok(fill_rows(&rows, pos, &refs, params)?.matrix)
}

/// Block B: `M` TOA rows per target, grouped by target.
pub fn toa_rows(pos: &PositionVector, refs: &ReferenceLayout) -> Result<DMatrix<f64>> {
    let rows: Vec<RowKind> = (0..pos.len())
        .flat_map(|target| (0..refs.len()).map(move |reference| RowKind::Toa { target, reference }))
        .collect();
    Ok(fill_rows(&rows, pos, refs, &ChannelParams::clear())?.matrix)
}

/// Block C: `M` remote-RSS rows per target, grouped by target.
pub fn remote_rss_rows(
    pos: &PositionVector,
    refs: &ReferenceLayout,
    params: &ChannelParams,
) -> Result<DMatrix<f64>> {
    let rows: Vec<RowKind> = (0..pos.len())
        .flat_map(|target| {
            (0..refs.len()).map(move |reference| RowKind::RemoteRss { target, reference })
        })
        .collect();
    Ok(fill_rows(&rows, pos, refs, params)?.matrix)
}

/// Full `D × 2N` Jacobian for the rows of `layout` (callers pass a compacted
/// layout to exclude masked rows).
pub fn assemble(
    pos: &PositionVector,
    layout: &ObservationLayout,
    refs: &ReferenceLayout,
    params: &ChannelParams,
) -> Result<JacobianMatrix> {
    if pos.len() != layout.n_targets || refs.len() != layout.n_refs {
        return Err(Error::Domain(format!(
            "layout is {}x{} (targets x refs) but got {}x{}",
            layout.n_targets,
            layout.n_refs,
            pos.len(),
            refs.len()
        )));
    }
    fill_rows(layout.rows(), pos, refs, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::forward_model;
    use crate::scenario::Scheme;
    use approx::assert_relative_eq;

    fn pts(p: &[(f64, f64)]) -> PositionVector {
        PositionVector::from_points(p).unwrap()
    }

    #[test]
    fn slope_constant() {
        assert_relative_eq!(rss_slope(3.086), 13.4023, epsilon = 5e-5);
    }

    #[test]
    fn neighbor_block_values() {
        let p = ChannelParams::clear();
        let a = neighbor_rss_rows(&pts(&[(0.0, 0.0), (1.0, 0.0)]), &p).unwrap();
        assert_eq!(a.shape(), (1, 4));
        assert_relative_eq!(a[(0, 0)], -13.4023, epsilon = 5e-5);
        assert_relative_eq!(a[(0, 1)], 13.4023, epsilon = 5e-5);
        assert_eq!(a[(0, 2)], 0.0);
        assert_eq!(a[(0, 3)], 0.0);

        let a = neighbor_rss_rows(&pts(&[(0.0, 0.0), (0.0, 2.0)]), &p).unwrap();
        assert_eq!(a[(0, 0)], 0.0);
        assert_eq!(a[(0, 1)], 0.0);
        assert_relative_eq!(a[(0, 2)], -rss_slope(3.086) / 2.0, max_relative = 1e-14);
        assert!(a.row(0).sum().abs() < 1e-12);
    }

    #[test]
    fn toa_block_values() {
        let refs = ReferenceLayout::from_points(&[(100.0, 0.0), (0.0, -5.0), (-3.0, 4.0)]).unwrap();
        let b = toa_rows(&pts(&[(0.0, 0.0)]), &refs).unwrap();
        assert_relative_eq!(b[(0, 0)], -1.0 / SPEED_OF_LIGHT, max_relative = 1e-14);
        assert_relative_eq!(b[(0, 0)], -3.3356e-9, epsilon = 1e-13);
        assert_eq!(b[(0, 1)], 0.0);
        assert_relative_eq!(b[(1, 1)], 1.0 / SPEED_OF_LIGHT, max_relative = 1e-14);
        for k in 0..3 {
            assert_relative_eq!(b.row(k).norm(), 1.0 / SPEED_OF_LIGHT, max_relative = 1e-14);
        }
    }

    #[test]
    fn remote_rss_block_values() {
        let p = ChannelParams::clear();
        let refs = ReferenceLayout::from_points(&[(10.0, 0.0), (5.0, 5.0), (20.0, 0.0)]).unwrap();
        let c = remote_rss_rows(&pts(&[(0.0, 0.0)]), &refs, &p).unwrap();
        assert_relative_eq!(c[(0, 0)], -1.34023, epsilon = 5e-6);
        assert_relative_eq!(c[(1, 0)].abs(), c[(1, 1)].abs(), max_relative = 1e-14);
        // magnitude ∝ 1/d: doubling the distance halves it
        assert_relative_eq!(c.row(2).norm(), c.row(0).norm() / 2.0, max_relative = 1e-14);
    }

    #[test]
    fn assembled_structure() {
        let p = ChannelParams::clear();
        let refs = ReferenceLayout::corners(50.0);
        let pos = pts(&[(20.0, 20.0), (21.0, 20.5)]);
        let l = ObservationLayout::new(Scheme::Cotar, 2, 4);
        let g = assemble(&pos, &l, &refs, &p).unwrap();
        assert_eq!((g.nrows(), g.ncols()), (17, 4));
        let nnz = |k: usize| g.matrix.row(k).iter().filter(|v| **v != 0.0).count();
        assert_eq!(nnz(0), 4);
        for k in 1..17 {
            assert_eq!(nnz(k), 2);
        }
        let t = assemble(
            &pos,
            &ObservationLayout::new(Scheme::ToaOnly, 2, 4),
            &refs,
            &p,
        )
        .unwrap();
        assert_eq!((t.nrows(), t.ncols()), (8, 4));
        assert!(t.near_degenerate.is_empty());
    }

    #[test]
    fn coincident_rows_error_and_close_rows_flagged() {
        let p = ChannelParams::clear();
        let refs = ReferenceLayout::corners(50.0);
        let l = ObservationLayout::new(Scheme::Cotar, 2, 4);
        let err = assemble(&pts(&[(3.0, 3.0), (3.0, 3.0)]), &l, &refs, &p).unwrap_err();
        assert!(matches!(err, Error::DegenerateGeometry { .. }));
        let err = assemble(&pts(&[(0.0, 0.0), (3.0, 3.0)]), &l, &refs, &p).unwrap_err();
        assert!(matches!(err, Error::DegenerateGeometry { .. }));
        let g = assemble(&pts(&[(3.0, 3.0), (3.05, 3.0)]), &l, &refs, &p).unwrap();
        assert_eq!(g.near_degenerate, vec![0]);
    }

    #[test]
    fn finite_difference_agreement_cotar() {
        let p = ChannelParams::clear();
        let refs = ReferenceLayout::corners(50.0);
        let pos = pts(&[(12.0, 31.0), (13.0, 31.4), (12.6, 32.2)]);
        let l = ObservationLayout::new(Scheme::Cotar, 3, 4);
        let g = assemble(&pos, &l, &refs, &p).unwrap().matrix;
        let h = 1e-4;
        let base = pos.stacked();
        for col in 0..6 {
            let mut up = base.clone();
            up[col] += h;
            let mut dn = base.clone();
            dn[col] -= h;
            let fu =
                forward_model(&PositionVector::from_stacked(&up).unwrap(), &l, &refs, &p).unwrap();
            let fd =
                forward_model(&PositionVector::from_stacked(&dn).unwrap(), &l, &refs, &p).unwrap();
            for row in 0..l.len() {
                let num = (fu[row] - fd[row]) / (2.0 * h);
                let scale = g.row(row).norm();
                assert!(
                    (num - g[(row, col)]).abs() <= 1e-5 * scale,
                    "row {row} col {col}"
                );
            }
        }
    }

    #[test]
    fn permuting_targets_permutes_columns() {
        let p = ChannelParams::clear();
        let refs = ReferenceLayout::corners(50.0);
        let a = pts(&[(10.0, 10.0), (11.0, 10.5), (10.2, 12.0)]);
        let b = pts(&[(10.2, 12.0), (10.0, 10.0), (11.0, 10.5)]); // perm: new k ← old perm[k]
        let perm = [2usize, 0, 1];
        let l = ObservationLayout::new(Scheme::ToaOnly, 3, 4);
        let ga = assemble(&a, &l, &refs, &p).unwrap().matrix;
        let gb = assemble(&b, &l, &refs, &p).unwrap().matrix;
        // TOA rows are grouped by target, so the row blocks move with the targets too.
        for (new, &old) in perm.iter().enumerate() {
            for j in 0..4 {
                assert_eq!(gb[(new * 4 + j, new)], ga[(old * 4 + j, old)]);
                assert_eq!(gb[(new * 4 + j, 3 + new)], ga[(old * 4 + j, 3 + old)]);
            }
        }
    }
}
