//! Observation model: row layout, forward model `f(x, y)`, diagonal noise
//! covariance and synthetic measurement generation.
//!
//! Rows mix units (dB for RSS, seconds for TOA). That is fine because every
//! downstream product goes through `Λ⁻¹`, which whitens each row.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::channel::{ChannelParams, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::jacobian::DEGENERATE_DISTANCE_M;
use crate::scenario::{PositionVector, ReferenceLayout, Scheme};

/// Identity of one measurement row. Indices are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowKind {
    /// RSS between targets `p < q`.
    NeighborRss { p: usize, q: usize },
    /// TOA of target `target` at reference `reference`.
    Toa { target: usize, reference: usize },
    /// RSS of target `target` at reference `reference`.
    RemoteRss { target: usize, reference: usize },
}

impl RowKind {
    pub fn name(&self) -> &'static str {
        match self {
            RowKind::NeighborRss { .. } => "neighbor_rss",
            RowKind::Toa { .. } => "toa",
            RowKind::RemoteRss { .. } => "remote_rss",
        }
    }

    pub fn indices(&self) -> (usize, usize) {
        match *self {
            RowKind::NeighborRss { p, q } => (p, q),
            RowKind::Toa { target, reference } | RowKind::RemoteRss { target, reference } => {
                (target, reference)
            }
        }
    }

    pub fn is_rss(&self) -> bool {
        !matches!(self, RowKind::Toa { .. })
    }
}

/// Row map for one scheme: neighbor RSS pairs in lexicographic order, then
/// TOA grouped by target, then remote RSS grouped by target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservationLayout {
    pub n_targets: usize,
    pub n_refs: usize,
    pub scheme: Scheme,
    rows: Vec<RowKind>,
}

impl ObservationLayout {
    pub fn new(scheme: Scheme, n_targets: usize, n_refs: usize) -> Self {
        let mut rows = Vec::with_capacity(scheme.row_count(n_targets, n_refs));
        if scheme.uses_neighbor_rss() {
            for p in 0..n_targets {
                for q in (p + 1)..n_targets {
                    rows.push(RowKind::NeighborRss { p, q });
                }
            }
        }
        if scheme.uses_toa() {
            for target in 0..n_targets {
                for reference in 0..n_refs {
                    rows.push(RowKind::Toa { target, reference });
                }
            }
        }
        if scheme.uses_remote_rss() {
            for target in 0..n_targets {
                for reference in 0..n_refs {
                    rows.push(RowKind::RemoteRss { target, reference });
                }
            }
        }
        ObservationLayout {
            n_targets,
            n_refs,
            scheme,
            rows,
        }
    }

    pub fn rows(&self) -> &[RowKind] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Layout keeping only the rows where `keep` is true.
    pub fn filtered(&self, keep: &[bool]) -> Self {
        ObservationLayout {
            rows: self
                .rows
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(r, _)| *r)
                .collect(),
            ..self.clone()
        }
    }

    fn check(&self, pos: &PositionVector, refs: &ReferenceLayout) -> Result<()> {
        if pos.len() != self.n_targets {
            return Err(Error::Domain(format!(
                "layout expects {} targets, got {}",
                self.n_targets,
                pos.len()
            )));
        }
        if refs.len() != self.n_refs {
            return Err(Error::Domain(format!(
                "layout expects {} references, got {}",
                self.n_refs,
                refs.len()
            )));
        }
        Ok(())
    }
}

/// Endpoints of a row: the first point is always a target.
pub(crate) fn row_endpoints(
    row: &RowKind,
    pos: &PositionVector,
    refs: &ReferenceLayout,
) -> ((f64, f64), (f64, f64)) {
    match *row {
        RowKind::NeighborRss { p, q } => (pos.node(p), pos.node(q)),
        RowKind::Toa { target, reference } | RowKind::RemoteRss { target, reference } => {
            (pos.node(target), refs.node(reference))
        }
    }
}

pub(crate) fn describe_pair(row: &RowKind) -> String {
    match *row {
        RowKind::NeighborRss { p, q } => format!("targets {} and {}", p + 1, q + 1),
        RowKind::Toa { target, reference } | RowKind::RemoteRss { target, reference } => {
            format!("target {} and reference {}", target + 1, reference + 1)
        }
    }
}

/// Distance of an active row, failing on coincident endpoints.
pub(crate) fn row_distance(
    row: &RowKind,
    pos: &PositionVector,
    refs: &ReferenceLayout,
) -> Result<f64> {
    let (a, b) = row_endpoints(row, pos, refs);
    let d = (a.0 - b.0).hypot(a.1 - b.1);
    if d < DEGENERATE_DISTANCE_M {
        return Err(Error::DegenerateGeometry {
            what: describe_pair(row),
            distance: d,
        });
    }
    Ok(d)
}

/// Noise-free value of every row in `layout` at `pos`.
pub fn forward_model(
    pos: &PositionVector,
    layout: &ObservationLayout,
    refs: &ReferenceLayout,
    params: &ChannelParams,
) -> Result<DVector<f64>> {
    layout.check(pos, refs)?;
    let mut out = DVector::zeros(layout.len());
    for (k, row) in layout.rows.iter().enumerate() {
        let d = row_distance(row, pos, refs)?;
        out[k] = match row {
            RowKind::Toa { .. } => d / SPEED_OF_LIGHT,
            _ => params.mean_path_loss_db(d)?,
        };
    }
    Ok(out)
}

/// Diagonal of `Λ`: `σ_g²` on RSS rows, `σ_τ²` on TOA rows.
pub fn build_covariance(layout: &ObservationLayout, params: &ChannelParams) -> DVector<f64> {
    DVector::from_iterator(
        layout.len(),
        layout.rows.iter().map(|r| match r {
            RowKind::Toa { .. } => params.sigma_tau_s * params.sigma_tau_s,
            _ => params.sigma_g_db * params.sigma_g_db,
        }),
    )
}

/// Measured values plus availability mask and per-row variances.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub values: DVector<f64>,
    pub mask: Vec<bool>,
    pub layout: ObservationLayout,
    pub variances: DVector<f64>,
}

impl ObservationSet {
    /// Fully-present observation set.
    pub fn new(
        values: DVector<f64>,
        layout: ObservationLayout,
        variances: DVector<f64>,
    ) -> Result<Self> {
        let mask = vec![true; layout.len()];
        Self::with_mask(values, mask, layout, variances)
    }

    pub fn with_mask(
        values: DVector<f64>,
        mask: Vec<bool>,
        layout: ObservationLayout,
        variances: DVector<f64>,
    ) -> Result<Self> {
        if values.len() != layout.len()
            || mask.len() != layout.len()
            || variances.len() != layout.len()
        {
            return Err(Error::Domain(
                "observation vectors disagree with layout length".into(),
            ));
        }
        Ok(ObservationSet {
            values,
            mask,
            layout,
            variances,
        })
    }

    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Copy with masked rows physically removed. Solvers work on this form.
    pub fn compacted(&self) -> ObservationSet {
        if self.mask.iter().all(|&m| m) {
            return self.clone();
        }
        let pick = |v: &DVector<f64>| {
            DVector::from_iterator(
                self.active_count(),
                v.iter()
                    .zip(&self.mask)
                    .filter(|(_, &m)| m)
                    .map(|(x, _)| *x),
            )
        };
        ObservationSet {
            values: pick(&self.values),
            variances: pick(&self.variances),
            layout: self.layout.filtered(&self.mask),
            mask: vec![true; self.active_count()],
        }
    }

    /// Debug dump: `row_id,kind,i,j,value,sigma,masked`, one-based node indices.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(["row_id", "kind", "i", "j", "value", "sigma", "masked"])
            .map_err(io)?;
        for (k, row) in self.layout.rows.iter().enumerate() {
            let (i, j) = row.indices();
            w.write_record([
                k.to_string(),
                row.name().to_string(),
                (i + 1).to_string(),
                (j + 1).to_string(),
                format!("{:e}", self.values[k]),
                format!("{:e}", self.variances[k].sqrt()),
                (!self.mask[k]).to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draw one noisy observation set at the true positions.
///
/// The noise stream `rng` is consumed one standard normal per row in layout
/// order. Neighbor-RSS availability is drawn from the separate `mask_rng` so
/// that the noise draws do not depend on `p_miss`.
pub fn synthesize<R: Rng + ?Sized, S: Rng + ?Sized>(
    pos: &PositionVector,
    layout: &ObservationLayout,
    refs: &ReferenceLayout,
    params: &ChannelParams,
    p_miss: f64,
    rng: &mut R,
    mask_rng: &mut S,
) -> Result<ObservationSet> {
    if !(0.0..=1.0).contains(&p_miss) {
        return Err(Error::Domain(format!(
            "p_miss must be in [0, 1], got {p_miss}"
        )));
    }
    let variances = build_covariance(layout, params);
    let mask: Vec<bool> = layout
        .rows
        .iter()
        .map(|r| match r {
            RowKind::NeighborRss { .. } => !(p_miss > 0.0 && mask_rng.random::<f64>() < p_miss),
            _ => true,
        })
        .collect();
    // Masked pairs may legitimately coincide, so evaluate the model on active rows.
    let active = layout.filtered(&mask);
    let mean_active = forward_model(pos, &active, refs, params)?;
    let mut values = DVector::zeros(layout.len());
    let mut next_active = 0;
    for k in 0..layout.len() {
        let z: f64 = StandardNormal.sample(rng);
        if mask[k] {
            values[k] = mean_active[next_active] + variances[k].sqrt() * z;
            next_active += 1;
        }
    }
    ObservationSet::with_mask(values, mask, layout.clone(), variances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corners50() -> ReferenceLayout {
        ReferenceLayout::corners(50.0)
    }

    #[test]
    fn cotar_row_order() {
        let l = ObservationLayout::new(Scheme::Cotar, 3, 4);
        assert_eq!(l.len(), 3 + 24);
        assert_eq!(l.rows()[0], RowKind::NeighborRss { p: 0, q: 1 });
        assert_eq!(l.rows()[1], RowKind::NeighborRss { p: 0, q: 2 });
        assert_eq!(l.rows()[2], RowKind::NeighborRss { p: 1, q: 2 });
        assert_eq!(
            l.rows()[3],
            RowKind::Toa {
                target: 0,
                reference: 0
            }
        );
        assert_eq!(
            l.rows()[7],
            RowKind::Toa {
                target: 1,
                reference: 0
            }
        );
        assert_eq!(
            l.rows()[15],
            RowKind::RemoteRss {
                target: 0,
                reference: 0
            }
        );
    }

    #[test]
    fn single_target_toa() {
        let refs =
            ReferenceLayout::from_points(&[(100.0, 0.0), (0.0, 100.0), (-100.0, 0.0)]).unwrap();
        let pos = PositionVector::from_points(&[(0.0, 0.0)]).unwrap();
        let l = ObservationLayout::new(Scheme::ToaOnly, 1, 3);
        let f = forward_model(&pos, &l, &refs, &ChannelParams::clear()).unwrap();
        assert_relative_eq!(f[0], 333.564e-9, epsilon = 1e-12);
        assert_relative_eq!(f[0], 100.0 / SPEED_OF_LIGHT, max_relative = 1e-15);
    }

    #[test]
    fn neighbor_rss_values() {
        let refs = corners50();
        let p = ChannelParams::clear();
        let l = ObservationLayout::new(Scheme::Cotar, 2, 4);
        let pos = PositionVector::from_points(&[(10.0, 10.0), (11.0, 10.0)]).unwrap();
        assert_eq!(forward_model(&pos, &l, &refs, &p).unwrap()[0], 0.0);
        let pos = PositionVector::from_points(&[(10.0, 10.0), (13.0, 14.0)]).unwrap();
        assert_relative_eq!(
            forward_model(&pos, &l, &refs, &p).unwrap()[0],
            21.57,
            epsilon = 5e-3
        );
    }

    #[test]
    fn coincident_pair_is_degenerate() {
        let l = ObservationLayout::new(Scheme::Cotar, 2, 4);
        let pos = PositionVector::from_points(&[(10.0, 10.0), (10.0, 10.0)]).unwrap();
        match forward_model(&pos, &l, &corners50(), &ChannelParams::clear()) {
            Err(Error::DegenerateGeometry { what, .. }) => assert_eq!(what, "targets 1 and 2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn covariance_blocks() {
        let l = ObservationLayout::new(Scheme::Cotar, 2, 4);
        let v = build_covariance(&l, &ChannelParams::clear());
        assert_eq!(v.len(), 17);
        assert_eq!(v[0], 64.0);
        for k in 1..9 {
            assert_relative_eq!(v[k], 8.8e-9 * 8.8e-9, max_relative = 1e-15);
        }
        for k in 9..17 {
            assert_eq!(v[k], 64.0);
        }
        let obs = build_covariance(&l, &ChannelParams::obstructed());
        assert_eq!(obs[0], 64.0);
        assert_relative_eq!(obs[1], 40.2e-9 * 40.2e-9, max_relative = 1e-15);
        assert_eq!(obs[16], 64.0);

        let toa = build_covariance(
            &ObservationLayout::new(Scheme::ToaOnly, 1, 4),
            &ChannelParams::clear(),
        );
        assert_eq!(toa.len(), 4);
        assert!(toa.iter().all(|&x| x == toa[0]));
    }

    #[test]
    fn masking_extremes() {
        let refs = corners50();
        let p = ChannelParams::clear();
        let l = ObservationLayout::new(Scheme::Cotar, 4, 4);
        let pos =
            PositionVector::from_points(&[(20.0, 20.0), (21.0, 20.0), (20.0, 21.0), (21.0, 21.0)])
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mrng = ChaCha8Rng::seed_from_u64(2);
        let none = synthesize(&pos, &l, &refs, &p, 0.0, &mut rng, &mut mrng).unwrap();
        assert!(none.mask.iter().all(|&m| m));
        let all = synthesize(&pos, &l, &refs, &p, 1.0, &mut rng, &mut mrng).unwrap();
        for (row, m) in all.layout.rows().iter().zip(&all.mask) {
            assert_eq!(*m, !matches!(row, RowKind::NeighborRss { .. }));
        }
        // Without neighbor rows the information content is the hybrid scheme's.
        let compact = all.compacted();
        assert_eq!(
            compact.layout.rows(),
            ObservationLayout::new(Scheme::Hybrid, 4, 4).rows()
        );
    }

    #[test]
    fn noiseless_synthesis_is_forward_model() {
        let refs = corners50();
        let p = ChannelParams::clear().noiseless();
        let l = ObservationLayout::new(Scheme::Cotar, 2, 4);
        let pos = PositionVector::from_points(&[(5.0, 7.0), (6.0, 7.5)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mrng = ChaCha8Rng::seed_from_u64(2);
        let s = synthesize(&pos, &l, &refs, &p, 0.0, &mut rng, &mut mrng).unwrap();
        assert_eq!(s.values, forward_model(&pos, &l, &refs, &p).unwrap());
    }

    #[test]
    fn noise_draws_do_not_depend_on_mask_probability() {
        let refs = corners50();
        let p = ChannelParams::clear();
        let l = ObservationLayout::new(Scheme::Cotar, 3, 4);
        let pos = PositionVector::from_points(&[(5.0, 7.0), (6.0, 7.5), (5.5, 9.0)]).unwrap();
        let a = synthesize(
            &pos,
            &l,
            &refs,
            &p,
            0.0,
            &mut ChaCha8Rng::seed_from_u64(4),
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let b = synthesize(
            &pos,
            &l,
            &refs,
            &p,
            0.5,
            &mut ChaCha8Rng::seed_from_u64(4),
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        for k in 0..l.len() {
            if b.mask[k] {
                assert_eq!(a.values[k], b.values[k]);
            }
        }
    }

    #[test]
    fn empirical_mean_matches_model() {
        let refs = corners50();
        let p = ChannelParams::clear();
        let l = ObservationLayout::new(Scheme::Cotar, 2, 4);
        let pos = PositionVector::from_points(&[(12.0, 30.0), (13.0, 30.0)]).unwrap();
        let f = forward_model(&pos, &l, &refs, &p).unwrap();
        let sd = build_covariance(&l, &p).map(f64::sqrt);
        let n = 10_000;
        let mut sum = DVector::zeros(l.len());
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut mrng = ChaCha8Rng::seed_from_u64(78);
        for _ in 0..n {
            sum += synthesize(&pos, &l, &refs, &p, 0.0, &mut rng, &mut mrng)
                .unwrap()
                .values;
        }
        let mean = sum / n as f64;
        for k in 0..l.len() {
            let se = sd[k] / (n as f64).sqrt();
            assert!((mean[k] - f[k]).abs() < 3.0 * se + 1e-18, "row {k}");
        }
    }

    #[test]
    fn compaction_drops_masked_rows() {
        let l = ObservationLayout::new(Scheme::Cotar, 3, 3);
        let v = DVector::from_iterator(l.len(), (0..l.len()).map(|k| k as f64));
        let mut mask = vec![true; l.len()];
        mask[1] = false;
        let set =
            ObservationSet::with_mask(v.clone(), mask, l.clone(), DVector::repeat(l.len(), 1.0))
                .unwrap();
        let c = set.compacted();
        assert_eq!(c.layout.len(), l.len() - 1);
        assert_eq!(c.values[1], 2.0);
        assert!(!c
            .layout
            .rows()
            .contains(&RowKind::NeighborRss { p: 0, q: 2 }));
    }

    #[test]
    fn csv_dump_columns() {
        let l = ObservationLayout::new(Scheme::Cotar, 2, 3);
        let set = ObservationSet::new(
            DVector::repeat(l.len(), 1.5),
            l.clone(),
            build_covariance(&l, &ChannelParams::clear()),
        )
        .unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "row_id,kind,i,j,value,sigma,masked");
        assert_eq!(lines.next().unwrap(), "0,neighbor_rss,1,2,1.5e0,8e0,false");
        assert_eq!(text.lines().count(), 1 + l.len());
    }

    proptest::proptest! {
        #[test]
        fn row_count_identity(n in 1usize..7, m in 3usize..10) {
            let l = ObservationLayout::new(Scheme::Cotar, n, m);
            proptest::prop_assert_eq!(l.len(), n * (n - 1) / 2 + 2 * m * n);
        }

        #[test]
        fn forward_model_rigid_translation(a in -500.0f64..500.0, b in -500.0f64..500.0) {
            let refs = corners50();
            let p = ChannelParams::clear();
            let l = ObservationLayout::new(Scheme::Cotar, 3, 4);
            let pos = PositionVector::from_points(&[(5.0, 7.0), (6.0, 7.5), (30.0, 41.0)]).unwrap();
            let f0 = forward_model(&pos, &l, &refs, &p).unwrap();
            let f1 = forward_model(&pos.translated(a, b), &l, &refs.translated(a, b), &p).unwrap();
            for k in 0..l.len() {
                proptest::prop_assert!((f0[k] - f1[k]).abs() <= 1e-9 * f0[k].abs().max(1e-9));
            }
        }
    }
}
