//! Experiment drivers: static Monte-Carlo runs, cooperation and missing-RSS
//! sweeps, and mobile tracking with wall reflection.
//!
//! Every (point, trial) or (track) work item owns its own ChaCha8 streams
//! derived from the run seed, so results do not depend on how rayon schedules
//! the work.

use std::f64::consts::TAU;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::rms_bound;
use crate::error::{Error, Result};
use crate::estimator::solve;
use crate::observation::{synthesize, ObservationLayout};
use crate::scenario::{
    EvaluationPoints, ExperimentConfig, MobilitySpec, PositionVector, TargetCluster,
};

/// Samples whose centroid is closer than this fraction of `L` to a wall are
/// excluded from the "interior" mobile metrics.
pub const INTERIOR_MARGIN_FRACTION: f64 = 0.1;

const NOISE_STREAM: u64 = 0;
const MASK_STREAM: u64 = 1;
const MOTION_STREAM: u64 = 2;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `(stream, a, b)` under `seed`.
pub fn substream(seed: u64, stream: u64, a: u64, b: u64) -> ChaCha8Rng {
    let s = splitmix(splitmix(splitmix(seed ^ splitmix(stream)) ^ a) ^ b);
    ChaCha8Rng::seed_from_u64(s)
}

/// One node's outcome at one localization instant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub step: usize,
    pub node: usize,
    pub true_x: f64,
    pub true_y: f64,
    pub est_x: f64,
    pub est_y: f64,
    pub err_m: f64,
    pub iters: usize,
}

impl TrialRecord {
    fn build(
        trial: usize,
        step: usize,
        truth: &PositionVector,
        est: &PositionVector,
        iters: usize,
    ) -> Vec<Self> {
        truth
            .nodes()
            .zip(est.nodes())
            .enumerate()
            .map(|(node, ((tx, ty), (ex, ey)))| TrialRecord {
                trial,
                step,
                node: node + 1,
                true_x: tx,
                true_y: ty,
                est_x: ex,
                est_y: ey,
                err_m: (ex - tx).hypot(ey - ty),
                iters,
            })
            .collect()
    }
}

/// CSV with columns `trial,step,node,true_x,true_y,est_x,est_y,err_m,iters`.
pub fn write_records_csv<W: Write>(records: &[TrialRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of one static trial: mean squared per-node error, or failure.
struct TrialOutcome {
    mse: Option<f64>,
    records: Vec<TrialRecord>,
}

fn run_trial(
    cfg: &ExperimentConfig,
    layout: &ObservationLayout,
    truth: &PositionVector,
    init: &PositionVector,
    point_idx: usize,
    trial: usize,
    keep: bool,
) -> TrialOutcome {
    let mut noise = substream(cfg.seed, NOISE_STREAM, point_idx as u64, trial as u64);
    let mut mask = substream(cfg.seed, MASK_STREAM, point_idx as u64, trial as u64);
    let result = synthesize(
        truth,
        layout,
        &cfg.references,
        &cfg.channel,
        cfg.p_missing_rss,
        &mut noise,
        &mut mask,
    )
    .and_then(|obs| solve(init, &obs, &cfg.references, &cfg.channel, cfg.iterations));
    match result {
        Ok(report) => {
            let est = &report.state.positions;
            let errs = truth.node_errors(est);
            let mse = errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64;
            let records = if keep {
                TrialRecord::build(trial, 0, truth, est, report.state.iteration)
            } else {
                Vec::new()
            };
            TrialOutcome {
                mse: Some(mse),
                records,
            }
        }
        Err(_) => TrialOutcome {
            mse: None,
            records: Vec::new(),
        },
    }
}

/// Aggregate at one cluster placement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointSummary {
    pub x: f64,
    pub y: f64,
    /// `sqrt(mean over trials and nodes of squared error)`.
    pub rms_m: f64,
    /// Standard error of `rms_m` (delta method on the per-trial mean squared error).
    pub rms_std_err_m: f64,
    /// RMS bound at the true placement; `NaN` if the bound is unbounded.
    pub eps_m: f64,
    pub trials: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StaticResult {
    pub points: Vec<PointSummary>,
    pub failures: usize,
    pub failure_rate: f64,
    #[serde(skip)]
    pub records: Vec<TrialRecord>,
}

fn summarize(x: f64, y: f64, eps: f64, outcomes: &[Option<f64>]) -> PointSummary {
    let ok: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let n = ok.len() as f64;
    let mean = ok.iter().sum::<f64>() / n;
    let rms = mean.sqrt();
    let se = if ok.len() > 1 {
        let var = ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt() / (2.0 * rms)
    } else {
        f64::NAN
    };
    PointSummary {
        x,
        y,
        rms_m: rms,
        rms_std_err_m: se,
        eps_m: eps,
        trials: outcomes.len(),
        failures: outcomes.len() - ok.len(),
    }
}

/// Monte-Carlo localization at every evaluation point of `cfg`, each trial
/// starting from [`ExperimentConfig::center_init`].
pub fn run_static(cfg: &ExperimentConfig, keep_records: bool) -> Result<StaticResult> {
    cfg.validate()?;
    let points = cfg.evaluation_points();
    let init = cfg.center_init();
    let layout = ObservationLayout::new(cfg.scheme, cfg.n_targets, cfg.references.len());
    let truths: Vec<PositionVector> = points
        .iter()
        .map(|&p| cfg.cluster_at(p).positions())
        .collect();

    let work: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..cfg.trials).map(move |t| (p, t)))
        .collect();
    let outcomes: Vec<TrialOutcome> = work
        .par_iter()
        .map(|&(p, t)| run_trial(cfg, &layout, &truths[p], &init, p, t, keep_records))
        .collect();

    let mut summaries = Vec::with_capacity(points.len());
    let mut records = Vec::new();
    for (p, chunk) in outcomes
        .chunks(cfg.trials.max(1))
        .enumerate()
        .take(points.len())
    {
        let eps = rms_bound(&truths[p], &layout, &cfg.references, &cfg.channel).unwrap_or(f64::NAN);
        let mses: Vec<Option<f64>> = chunk.iter().map(|o| o.mse).collect();
        summaries.push(summarize(points[p].0, points[p].1, eps, &mses));
        if keep_records {
            records.extend(chunk.iter().flat_map(|o| o.records.iter().cloned()));
        }
    }
    let failures: usize = summaries.iter().map(|s| s.failures).sum();
    let total = (points.len() * cfg.trials).max(1);
    Ok(StaticResult {
        points: summaries,
        failures,
        failure_rate: failures as f64 / total as f64,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CooperationRow {
    pub n_targets: usize,
    pub delta_m: f64,
    pub eps_m: f64,
    pub rms_m: f64,
    pub rms_std_err_m: f64,
    pub failures: usize,
}

/// Bound and Monte-Carlo RMS at the scenario centre for every `(N, Δ)`.
pub fn run_cooperation_sweep(
    cfg: &ExperimentConfig,
    n_values: &[usize],
    delta_values: &[f64],
) -> Result<Vec<CooperationRow>> {
    let mut rows = Vec::new();
    for &delta in delta_values {
        for &n in n_values {
            let mut c = cfg.with_cluster(n, delta);
            c.points = EvaluationPoints::Center;
            let s = &run_static(&c, false)?.points[0];
            rows.push(CooperationRow {
                n_targets: n,
                delta_m: delta,
                eps_m: s.eps_m,
                rms_m: s.rms_m,
                rms_std_err_m: s.rms_std_err_m,
                failures: s.failures,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissingRssRow {
    pub n_targets: usize,
    pub p_miss: f64,
    pub rms_m: f64,
    pub rms_std_err_m: f64,
    pub failures: usize,
}

/// Monte-Carlo RMS at the scenario centre as neighbor-RSS rows go missing.
/// The same seed is used at every `p`, so `p = 0` matches [`run_static`].
pub fn run_missing_rss_sweep(
    cfg: &ExperimentConfig,
    p_values: &[f64],
    n_values: &[usize],
) -> Result<Vec<MissingRssRow>> {
    let mut rows = Vec::new();
    for &n in n_values {
        for &p in p_values {
            let mut c = cfg.with_cluster(n, cfg.grid_spacing_m);
            c.p_missing_rss = p;
            c.points = EvaluationPoints::Center;
            let s = &run_static(&c, false)?.points[0];
            rows.push(MissingRssRow {
                n_targets: n,
                p_miss: p,
                rms_m: s.rms_m,
                rms_std_err_m: s.rms_std_err_m,
                failures: s.failures,
            });
        }
    }
    Ok(rows)
}

// ---- mobility ---------------------------------------------------------------

/// Fold a coordinate moved by `v` into `[lo, hi]` by specular reflection.
/// Returns the new coordinate and velocity.
pub fn reflect(p: f64, v: f64, lo: f64, hi: f64) -> (f64, f64) {
    let w = hi - lo;
    if w <= 0.0 {
        return (lo, v);
    }
    let u = (p + v - lo).rem_euclid(2.0 * w);
    if u <= w {
        (lo + u, v)
    } else {
        (lo + 2.0 * w - u, -v)
    }
}

/// Centroid positions of one track at each sample instant.
pub fn track_anchors<R: Rng + ?Sized>(
    spec: &MobilitySpec,
    side: f64,
    formation: &[(f64, f64)],
    rng: &mut R,
) -> Vec<(f64, f64)> {
    let centroid = TargetCluster::centered_on(formation.to_vec(), (0.0, 0.0));
    let off = centroid.positions();
    let lo = |v: &[f64]| -v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = |v: &[f64]| side - v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (x0, x1, y0, y1) = (lo(off.x()), hi(off.x()), lo(off.y()), hi(off.y()));

    let mut x = x0 + rng.random::<f64>() * (x1 - x0);
    let mut y = y0 + rng.random::<f64>() * (y1 - y0);
    let heading = spec
        .heading_rad
        .unwrap_or_else(|| rng.random::<f64>() * TAU);
    let step = spec.speed_mps() * spec.sample_interval_s;
    let (mut vx, mut vy) = (step * heading.cos(), step * heading.sin());

    let mut out = Vec::with_capacity(spec.steps());
    out.push((x, y));
    for k in 1..spec.steps() {
        if let Some(period) = spec.heading_change_period_s {
            let t = k as f64 * spec.sample_interval_s;
            let prev = (k - 1) as f64 * spec.sample_interval_s;
            if (t / period).floor() > (prev / period).floor() {
                let h = rng.random::<f64>() * TAU;
                vx = step * h.cos();
                vy = step * h.sin();
            }
        }
        (x, vx) = reflect(x, vx, x0, x1);
        (y, vy) = reflect(y, vy, y0, y1);
        out.push((x, y));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MobileSummary {
    pub speed_kmh: f64,
    pub tracks: usize,
    pub steps_per_track: usize,
    /// Over every sample except the first of each track.
    pub rms_m: f64,
    /// RMS of the bound over the same samples.
    pub eps_m: f64,
    pub rms_interior_m: f64,
    pub eps_interior_m: f64,
    pub interior_samples: usize,
    pub samples: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MobileResult {
    pub summary: MobileSummary,
    #[serde(skip)]
    pub records: Vec<TrialRecord>,
}

struct TrackOutcome {
    /// (mse, eps², interior) for each successful non-initial sample.
    samples: Vec<(f64, f64, bool)>,
    failures: usize,
    records: Vec<TrialRecord>,
}

fn run_track(
    cfg: &ExperimentConfig,
    spec: &MobilitySpec,
    layout: &ObservationLayout,
    track: usize,
    keep: bool,
) -> TrackOutcome {
    let mut motion = substream(cfg.seed, MOTION_STREAM, track as u64, 0);
    let anchors = track_anchors(spec, cfg.area_side_m, &cfg.formation, &mut motion);
    let margin = INTERIOR_MARGIN_FRACTION * cfg.area_side_m;
    let interior = |(x, y): (f64, f64)| {
        x >= margin && y >= margin && x <= cfg.area_side_m - margin && y <= cfg.area_side_m - margin
    };

    let mut init = cfg.center_init();
    let mut out = TrackOutcome {
        samples: Vec::new(),
        failures: 0,
        records: Vec::new(),
    };
    for (step, &anchor) in anchors.iter().enumerate() {
        let truth = cfg.cluster_at(anchor).positions();
        let mut noise = substream(cfg.seed, NOISE_STREAM, track as u64, step as u64);
        let mut mask = substream(cfg.seed, MASK_STREAM, track as u64, step as u64);
        let result = synthesize(
            &truth,
            layout,
            &cfg.references,
            &cfg.channel,
            cfg.p_missing_rss,
            &mut noise,
            &mut mask,
        )
        .and_then(|obs| solve(&init, &obs, &cfg.references, &cfg.channel, cfg.iterations));
        let report = match result {
            Ok(r) => r,
            Err(_) => {
                // Keep the last good estimate as the next starting point.
                out.failures += 1;
                continue;
            }
        };
        let est = report.state.positions;
        if step > 0 {
            let errs = truth.node_errors(&est);
            let mse = errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64;
            let eps = rms_bound(&truth, layout, &cfg.references, &cfg.channel).unwrap_or(f64::NAN);
            out.samples.push((mse, eps * eps, interior(anchor)));
        }
        if keep {
            out.records.extend(TrialRecord::build(
                track,
                step,
                &truth,
                &est,
                report.state.iteration,
            ));
        }
        init = est;
    }
    out
}

/// Track clusters moving at constant speed with reflection at the walls;
/// each sample is solved from the previous estimate.
pub fn run_mobile(cfg: &ExperimentConfig, keep_records: bool) -> Result<MobileResult> {
    cfg.validate()?;
    let spec = cfg
        .mobility
        .as_ref()
        .ok_or_else(|| Error::config("mobility", "required for mobile tracking"))?;
    let layout = ObservationLayout::new(cfg.scheme, cfg.n_targets, cfg.references.len());
    let tracks: Vec<TrackOutcome> = (0..spec.tracks)
        .into_par_iter()
        .map(|t| run_track(cfg, spec, &layout, t, keep_records))
        .collect();

    let all: Vec<(f64, f64, bool)> = tracks
        .iter()
        .flat_map(|t| t.samples.iter().copied())
        .collect();
    let root_mean = |it: &mut dyn Iterator<Item = f64>| {
        let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (s / n as f64).sqrt()
    };
    let inner: Vec<_> = all.iter().filter(|s| s.2).collect();
    let summary = MobileSummary {
        speed_kmh: spec.speed_kmh,
        tracks: spec.tracks,
        steps_per_track: spec.steps(),
        rms_m: root_mean(&mut all.iter().map(|s| s.0)),
        eps_m: root_mean(&mut all.iter().map(|s| s.1)),
        rms_interior_m: root_mean(&mut inner.iter().map(|s| s.0)),
        eps_interior_m: root_mean(&mut inner.iter().map(|s| s.1)),
        interior_samples: inner.len(),
        samples: all.len(),
        failures: tracks.iter().map(|t| t.failures).sum(),
    };
    let records = tracks.into_iter().flat_map(|t| t.records).collect();
    Ok(MobileResult { summary, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelParams;
    use crate::scenario::Scheme;
    use proptest::prelude::*;

    fn cfg(scheme: Scheme, n: usize, trials: usize) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(50.0, n, 1.0, scheme);
        c.trials = trials;
        c.seed = 11;
        c
    }

    #[test]
    fn noiseless_static_is_exact() {
        let mut c = cfg(Scheme::Cotar, 4, 5);
        c.channel = ChannelParams::clear().noiseless();
        c.iterations = 6;
        c.points = EvaluationPoints::Explicit(vec![(20.0, 30.0)]);
        let r = run_static(&c, true).unwrap();
        assert!(r.points[0].rms_m < 1e-6, "{}", r.points[0].rms_m);
        assert_eq!(r.records.len(), 5 * 4);
    }

    #[test]
    fn static_is_deterministic_across_thread_counts() {
        let mut c = cfg(Scheme::Cotar, 4, 40);
        c.points = EvaluationPoints::Explicit(vec![(10.0, 10.0), (25.0, 25.0), (40.0, 12.0)]);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_static(&c, true).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b);
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn records_match_rms() {
        let c = cfg(Scheme::ToaOnly, 1, 50);
        let r = run_static(&c, true).unwrap();
        let ms = r.records.iter().map(|r| r.err_m * r.err_m).sum::<f64>() / r.records.len() as f64;
        assert!((ms.sqrt() - r.points[0].rms_m).abs() < 1e-12);
        for rec in &r.records {
            let d = (rec.est_x - rec.true_x).hypot(rec.est_y - rec.true_y);
            assert_eq!(d, rec.err_m);
        }
    }

    #[test]
    fn zero_miss_sweep_matches_static() {
        let c = cfg(Scheme::Cotar, 2, 30);
        let s = run_static(&c, false).unwrap();
        let rows = run_missing_rss_sweep(&c, &[0.0, 0.5], &[2]).unwrap();
        assert_eq!(rows[0].rms_m.to_bits(), s.points[0].rms_m.to_bits());
    }

    #[test]
    fn cooperation_sweep_rows_in_order() {
        let c = cfg(Scheme::Cotar, 1, 10);
        let rows = run_cooperation_sweep(&c, &[1, 4], &[1.0, 2.0]).unwrap();
        let keys: Vec<_> = rows.iter().map(|r| (r.n_targets, r.delta_m)).collect();
        assert_eq!(keys, vec![(1, 1.0), (4, 1.0), (1, 2.0), (4, 2.0)]);
        assert!(rows[1].eps_m < rows[0].eps_m);
    }

    #[test]
    fn reflect_examples() {
        assert_eq!(reflect(5.0, 3.0, 0.0, 10.0), (8.0, 3.0));
        assert_eq!(reflect(8.0, 5.0, 0.0, 10.0), (7.0, -5.0));
        assert_eq!(reflect(2.0, -5.0, 0.0, 10.0), (3.0, 5.0));
        assert_eq!(reflect(1.0, 25.0, 0.0, 10.0), (6.0, 25.0));
    }

    #[test]
    fn zero_speed_track_is_stationary() {
        let spec = MobilitySpec {
            speed_kmh: 0.0,
            sample_interval_s: 5.0,
            duration_s: 50.0,
            heading_rad: None,
            heading_change_period_s: None,
            tracks: 1,
        };
        let a = track_anchors(&spec, 100.0, &[(0.0, 0.0)], &mut substream(1, 2, 3, 4));
        assert_eq!(a.len(), 11);
        assert!(a.iter().all(|p| *p == a[0]));
    }

    #[test]
    fn mobile_runs_and_is_deterministic() {
        let mut c = cfg(Scheme::Cotar, 2, 1);
        c.area_side_m = 200.0;
        c.references = crate::scenario::ReferenceLayout::corners(200.0);
        c.mobility = Some(MobilitySpec {
            speed_kmh: 40.0,
            sample_interval_s: 5.0,
            duration_s: 60.0,
            heading_rad: None,
            heading_change_period_s: Some(20.0),
            tracks: 6,
        });
        let a = run_mobile(&c, true).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| run_mobile(&c, true).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.summary.samples, 6 * 12);
        assert_eq!(a.records.len(), 6 * 13 * 2);
        assert!(a.summary.rms_m.is_finite() && a.summary.eps_m > 0.0);
    }

    #[test]
    fn mobile_requires_spec() {
        let c = cfg(Scheme::Cotar, 2, 1);
        assert!(matches!(run_mobile(&c, false), Err(Error::Config { .. })));
    }

    proptest! {
        #[test]
        fn anchors_stay_inside_at_constant_speed(
            speed in 0.0f64..300.0, seed in 0u64..1000, heading in proptest::option::of(0.0f64..std::f64::consts::TAU),
        ) {
            let spec = MobilitySpec {
                speed_kmh: speed,
                sample_interval_s: 5.0,
                duration_s: 300.0,
                heading_rad: heading,
                heading_change_period_s: None,
                tracks: 1,
            };
            let formation = vec![(0.0, 0.0), (1.0, 0.0)];
            let side = 120.0;
            let a = track_anchors(&spec, side, &formation, &mut substream(seed, 2, 0, 0));
            for &(x, y) in &a {
                prop_assert!((0.5..=side - 0.5).contains(&x) && (0.0..=side).contains(&y));
            }
            // Unfolded motion has constant length per step, so each folded
            // step is no longer than the true step.
            let step = spec.speed_mps() * spec.sample_interval_s;
            for w in a.windows(2) {
                let d = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
                prop_assert!(d <= step + 1e-9);
            }
        }
    }
}
