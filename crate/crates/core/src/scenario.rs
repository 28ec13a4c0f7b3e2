//! Scenario geometry, scheme selection and experiment configuration.
//!
//! Target nodes are indexed in formation order; that order fixes the row
//! layout of observations and the column layout of every Jacobian and Fisher
//! matrix downstream (all x-coordinates first, then all y-coordinates).

use std::fmt;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelParams;
use crate::error::{Error, Result};

/// Stacked coordinates of `N` target nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionVector {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl PositionVector {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Domain(format!(
                "x has {} coordinates but y has {}",
                x.len(),
                y.len()
            )));
        }
        if x.is_empty() {
            return Err(Error::Domain(
                "position vector needs at least one node".into(),
            ));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite coordinate".into()));
        }
        Ok(PositionVector { x, y })
    }

    pub fn from_points(points: &[(f64, f64)]) -> Result<Self> {
        let (x, y) = points.iter().copied().unzip();
        Self::new(x, y)
    }

    /// Every node at the same point.
    pub fn repeated(n: usize, point: (f64, f64)) -> Result<Self> {
        Self::new(vec![point.0; n], vec![point.1; n])
    }

    /// Inverse of [`PositionVector::stacked`].
    pub fn from_stacked(v: &DVector<f64>) -> Result<Self> {
        if !v.len().is_multiple_of(2) {
            return Err(Error::Domain(format!(
                "stacked vector has odd length {}",
                v.len()
            )));
        }
        let n = v.len() / 2;
        Self::new(
            v.rows(0, n).iter().copied().collect(),
            v.rows(n, n).iter().copied().collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn node(&self, i: usize) -> (f64, f64) {
        (self.x[i], self.y[i])
    }

    pub fn nodes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.x.iter().copied().zip(self.y.iter().copied())
    }

    /// Column vector `(x₁ … x_N, y₁ … y_N)`.
    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.len(), self.x.iter().chain(self.y.iter()).copied())
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        PositionVector {
            x: self.x.iter().map(|v| v + dx).collect(),
            y: self.y.iter().map(|v| v + dy).collect(),
        }
    }

    pub fn centroid(&self) -> (f64, f64) {
        let n = self.len() as f64;
        (
            self.x.iter().sum::<f64>() / n,
            self.y.iter().sum::<f64>() / n,
        )
    }

    /// Euclidean distance between node `i` of `self` and node `i` of `other`.
    pub fn node_errors(&self, other: &PositionVector) -> Vec<f64> {
        self.nodes()
            .zip(other.nodes())
            .map(|(a, b)| (a.0 - b.0).hypot(a.1 - b.1))
            .collect()
    }
}

/// Known coordinates of the `M ≥ 3` reference (anchor) nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLayout {
    xr: Vec<f64>,
    yr: Vec<f64>,
}

pub const MIN_REFERENCES: usize = 3;

impl ReferenceLayout {
    pub fn new(xr: Vec<f64>, yr: Vec<f64>) -> Result<Self> {
        if xr.len() != yr.len() {
            return Err(Error::Domain("reference x/y lengths differ".into()));
        }
        if xr.len() < MIN_REFERENCES {
            return Err(Error::Domain(format!(
                "reference count below minimum {MIN_REFERENCES}"
            )));
        }
        if xr.iter().chain(yr.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite reference coordinate".into()));
        }
        for i in 0..xr.len() {
            for j in (i + 1)..xr.len() {
                if xr[i] == xr[j] && yr[i] == yr[j] {
                    return Err(Error::Domain(format!(
                        "reference nodes {} and {} coincide",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(ReferenceLayout { xr, yr })
    }

    pub fn from_points(points: &[(f64, f64)]) -> Result<Self> {
        let (x, y) = points.iter().copied().unzip();
        Self::new(x, y)
    }

    /// Four anchors at the corners of the `[0, L]²` square.
    pub fn corners(side: f64) -> Self {
        ReferenceLayout {
            xr: vec![0.0, side, 0.0, side],
            yr: vec![0.0, 0.0, side, side],
        }
    }

    /// Anchors on a regular lattice covering `[0, L]²` with the given pitch
    /// (nine anchors for `L = 50`, pitch 25).
    pub fn grid(side: f64, pitch: f64) -> Result<Self> {
        if !(pitch > 0.0) {
            return Err(Error::Domain("reference grid pitch must be > 0".into()));
        }
        let per_axis = (side / pitch).round() as usize + 1;
        let mut pts = Vec::with_capacity(per_axis * per_axis);
        for iy in 0..per_axis {
            for ix in 0..per_axis {
                pts.push((ix as f64 * pitch, iy as f64 * pitch));
            }
        }
        Self::from_points(&pts)
    }

    pub fn len(&self) -> usize {
        self.xr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xr.is_empty()
    }

    pub fn node(&self, j: usize) -> (f64, f64) {
        (self.xr[j], self.yr[j])
    }

    pub fn nodes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.xr.iter().copied().zip(self.yr.iter().copied())
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        ReferenceLayout {
            xr: self.xr.iter().map(|v| v + dx).collect(),
            yr: self.yr.iter().map(|v| v + dy).collect(),
        }
    }

    /// Axis-aligned bounding box `(xmin, ymin, xmax, ymax)`.
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        let fold = |v: &[f64]| {
            v.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| {
                    (lo.min(a), hi.max(a))
                })
        };
        let (x0, x1) = fold(&self.xr);
        let (y0, y1) = fold(&self.yr);
        (x0, y0, x1, y1)
    }
}

/// A rigid group of target nodes: fixed offsets relative to a moving anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCluster {
    pub formation: Vec<(f64, f64)>,
    pub anchor: (f64, f64),
}

impl TargetCluster {
    pub fn new(formation: Vec<(f64, f64)>, anchor: (f64, f64)) -> Self {
        TargetCluster { formation, anchor }
    }

    /// Place the formation so that its centroid sits on `point`.
    pub fn centered_on(formation: Vec<(f64, f64)>, point: (f64, f64)) -> Self {
        let (cx, cy) = formation_centroid(&formation);
        TargetCluster {
            formation,
            anchor: (point.0 - cx, point.1 - cy),
        }
    }

    pub fn len(&self) -> usize {
        self.formation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.formation.is_empty()
    }

    /// Absolute node positions, in formation order.
    pub fn positions(&self) -> PositionVector {
        let (ax, ay) = self.anchor;
        let x = self.formation.iter().map(|o| ax + o.0).collect();
        let y = self.formation.iter().map(|o| ay + o.1).collect();
        PositionVector { x, y }
    }
}

/// Row-major fill of the smallest `s × s` grid holding `n` nodes, spacing `spacing`.
/// For perfect squares this is the full `√n × √n` grid.
pub fn square_formation(n: usize, spacing: f64) -> Vec<(f64, f64)> {
    let side = (n as f64).sqrt().ceil() as usize;
    (0..n)
        .map(|k| ((k % side) as f64 * spacing, (k / side) as f64 * spacing))
        .collect()
}

fn formation_centroid(formation: &[(f64, f64)]) -> (f64, f64) {
    if formation.is_empty() {
        return (0.0, 0.0);
    }
    let n = formation.len() as f64;
    let sx: f64 = formation.iter().map(|o| o.0).sum();
    let sy: f64 = formation.iter().map(|o| o.1).sum();
    (sx / n, sy / n)
}

/// Which measurement modalities a localization run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[serde(alias = "rss")]
    RssOnly,
    #[serde(alias = "toa")]
    ToaOnly,
    #[serde(alias = "hybrid_toa_rss")]
    Hybrid,
    Cotar,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::RssOnly,
        Scheme::ToaOnly,
        Scheme::Hybrid,
        Scheme::Cotar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::RssOnly => "rss_only",
            Scheme::ToaOnly => "toa_only",
            Scheme::Hybrid => "hybrid",
            Scheme::Cotar => "cotar",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rss_only" | "rss" => Some(Scheme::RssOnly),
            "toa_only" | "toa" => Some(Scheme::ToaOnly),
            "hybrid" | "hybrid_toa_rss" => Some(Scheme::Hybrid),
            "cotar" => Some(Scheme::Cotar),
            _ => None,
        }
    }

    pub fn uses_neighbor_rss(self) -> bool {
        matches!(self, Scheme::Cotar)
    }

    pub fn uses_toa(self) -> bool {
        !matches!(self, Scheme::RssOnly)
    }

    pub fn uses_remote_rss(self) -> bool {
        !matches!(self, Scheme::ToaOnly)
    }

    /// Number of observation rows for `n` targets and `m` references.
    pub fn row_count(self, n: usize, m: usize) -> usize {
        let pairs = if self.uses_neighbor_rss() {
            n * n.saturating_sub(1) / 2
        } else {
            0
        };
        pairs + m * n * (self.uses_toa() as usize + self.uses_remote_rss() as usize)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Motion of a cluster in tracking experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilitySpec {
    pub speed_kmh: f64,
    pub sample_interval_s: f64,
    pub duration_s: f64,
    /// Fixed initial heading in radians; `None` draws it uniformly per track.
    pub heading_rad: Option<f64>,
    /// Redraw the heading at this period; `None` keeps it until a wall hit.
    pub heading_change_period_s: Option<f64>,
    pub tracks: usize,
}

impl MobilitySpec {
    pub fn speed_mps(&self) -> f64 {
        self.speed_kmh / 3.6
    }

    /// Number of localization instants per track, including `t = 0`.
    pub fn steps(&self) -> usize {
        (self.duration_s / self.sample_interval_s + 1e-9).floor() as usize + 1
    }
}

/// Where the cluster is placed in static experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationPoints {
    Center,
    Lattice,
    Explicit(Vec<(f64, f64)>),
}

/// Value lists for the sweep subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub n_values: Vec<usize>,
    pub delta_values: Vec<f64>,
    pub p_values: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            n_values: vec![1, 4, 9, 16, 25],
            delta_values: vec![1.0],
            p_values: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

pub const DEFAULT_ITERATIONS: usize = 2;
pub const DEFAULT_TRIALS: usize = 1000;
pub const DEFAULT_TRACKS: usize = 200;
pub const DEFAULT_SAMPLE_INTERVAL_S: f64 = 5.0;

/// A validated experiment description.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub area_side_m: f64,
    pub references: ReferenceLayout,
    pub n_targets: usize,
    pub grid_spacing_m: f64,
    pub formation: Vec<(f64, f64)>,
    /// `"clear"`, `"obstructed"` or `"custom"`.
    pub condition: String,
    pub channel: ChannelParams,
    pub scheme: Scheme,
    pub iterations: usize,
    pub trials: usize,
    pub seed: u64,
    pub p_missing_rss: f64,
    pub mobility: Option<MobilitySpec>,
    pub points: EvaluationPoints,
    pub lattice_pitch_m: f64,
    pub sweep: SweepSpec,
}

impl ExperimentConfig {
    /// Config with defaults for everything but the geometry.
    pub fn new(area_side_m: f64, n_targets: usize, grid_spacing_m: f64, scheme: Scheme) -> Self {
        ExperimentConfig {
            area_side_m,
            references: ReferenceLayout::corners(area_side_m),
            n_targets,
            grid_spacing_m,
            formation: square_formation(n_targets, grid_spacing_m),
            condition: "clear".into(),
            channel: ChannelParams::clear(),
            scheme,
            iterations: DEFAULT_ITERATIONS,
            trials: DEFAULT_TRIALS,
            seed: 0,
            p_missing_rss: 0.0,
            mobility: None,
            points: EvaluationPoints::Center,
            lattice_pitch_m: 1.0,
            sweep: SweepSpec::default(),
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.area_side_m / 2.0, self.area_side_m / 2.0)
    }

    pub fn cluster_at(&self, point: (f64, f64)) -> TargetCluster {
        TargetCluster::centered_on(self.formation.clone(), point)
    }

    /// Default starting iterate: the formation centred on the scenario centre.
    /// For a single node this is exactly `(L/2, L/2)`.
    pub fn center_init(&self) -> PositionVector {
        self.cluster_at(self.center()).positions()
    }

    /// Lattice of cluster centroids with `lattice_pitch_m` spacing, offset by
    /// half a pitch from the walls, keeping only placements where every node
    /// stays inside the square.
    pub fn lattice_points(&self) -> Vec<(f64, f64)> {
        lattice_points(self.area_side_m, self.lattice_pitch_m, &self.formation)
    }

    pub fn evaluation_points(&self) -> Vec<(f64, f64)> {
        match &self.points {
            EvaluationPoints::Center => vec![self.center()],
            EvaluationPoints::Lattice => self.lattice_points(),
            EvaluationPoints::Explicit(p) => p.clone(),
        }
    }

    /// Copy with a different cluster size/spacing (square formation).
    pub fn with_cluster(&self, n_targets: usize, spacing: f64) -> Self {
        let mut c = self.clone();
        c.n_targets = n_targets;
        c.grid_spacing_m = spacing;
        c.formation = square_formation(n_targets, spacing);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.area_side_m > 0.0 && self.area_side_m.is_finite()) {
            return Err(Error::config("area_side_m", "must be a positive number"));
        }
        if self.references.len() < MIN_REFERENCES {
            return Err(Error::config(
                "references",
                "reference count below minimum 3",
            ));
        }
        if self.n_targets == 0 {
            return Err(Error::config("n_targets", "must be at least 1"));
        }
        if self.formation.len() != self.n_targets {
            return Err(Error::config(
                "formation",
                format!(
                    "has {} offsets but n_targets is {}",
                    self.formation.len(),
                    self.n_targets
                ),
            ));
        }
        for i in 0..self.formation.len() {
            for j in (i + 1)..self.formation.len() {
                let (a, b) = (self.formation[i], self.formation[j]);
                if (a.0 - b.0).hypot(a.1 - b.1) < crate::jacobian::DEGENERATE_DISTANCE_M {
                    return Err(Error::config(
                        "formation",
                        format!("targets {} and {} coincide", i + 1, j + 1),
                    ));
                }
            }
        }
        if !(self.grid_spacing_m > 0.0) {
            return Err(Error::config("grid_spacing_m", "must be > 0"));
        }
        self.channel
            .validate()
            .map_err(|e| Error::config("channel", e.to_string()))?;
        if self.iterations < 1 {
            return Err(Error::config("iterations", "must be >= 1"));
        }
        if self.trials < 1 {
            return Err(Error::config("trials", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.p_missing_rss) {
            return Err(Error::config("p_missing_rss", "must lie in [0, 1]"));
        }
        if !(self.lattice_pitch_m > 0.0) {
            return Err(Error::config("lattice_pitch_m", "must be > 0"));
        }
        if let Some(m) = &self.mobility {
            if !(m.speed_kmh >= 0.0 && m.speed_kmh.is_finite()) {
                return Err(Error::config("mobility.speed_kmh", "must be >= 0"));
            }
            if !(m.sample_interval_s > 0.0) {
                return Err(Error::config("mobility.sample_interval_s", "must be > 0"));
            }
            if !(m.duration_s >= m.sample_interval_s) {
                return Err(Error::config(
                    "mobility.duration_s",
                    "must be >= sample_interval_s",
                ));
            }
            if m.tracks < 1 {
                return Err(Error::config("mobility.tracks", "must be >= 1"));
            }
            if matches!(m.heading_change_period_s, Some(p) if !(p > 0.0)) {
                return Err(Error::config(
                    "mobility.heading_change_period_s",
                    "must be > 0",
                ));
            }
        }
        for (k, &n) in self.sweep.n_values.iter().enumerate() {
            if n == 0 {
                return Err(Error::config(
                    format!("sweep.n_values[{k}]"),
                    "must be >= 1",
                ));
            }
        }
        for (k, &d) in self.sweep.delta_values.iter().enumerate() {
            if !(d > 0.0) {
                return Err(Error::config(
                    format!("sweep.delta_values[{k}]"),
                    "must be > 0",
                ));
            }
        }
        for (k, &p) in self.sweep.p_values.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(
                    format!("sweep.p_values[{k}]"),
                    "must lie in [0, 1]",
                ));
            }
        }
        Ok(())
    }
}

/// See [`ExperimentConfig::lattice_points`].
pub fn lattice_points(side: f64, pitch: f64, formation: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let (cx, cy) = formation_centroid(formation);
    let inside = |p: (f64, f64)| {
        formation.iter().all(|o| {
            let (x, y) = (p.0 - cx + o.0, p.1 - cy + o.1);
            (0.0..=side).contains(&x) && (0.0..=side).contains(&y)
        })
    };
    let count = (side / pitch).floor() as usize;
    let mut out = Vec::new();
    for iy in 0..count {
        for ix in 0..count {
            let p = ((ix as f64 + 0.5) * pitch, (iy as f64 + 0.5) * pitch);
            if inside(p) {
                out.push(p);
            }
        }
    }
    out
}

// ---- JSON schema -----------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    area_side_m: f64,
    #[serde(default)]
    references: Option<RawReferences>,
    #[serde(default)]
    n_targets: Option<usize>,
    #[serde(default)]
    grid_spacing_m: Option<f64>,
    #[serde(default)]
    formation: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    channel: Option<RawChannel>,
    #[serde(default)]
    scheme: Option<String>,
    #[serde(default)]
    iterations: Option<usize>,
    #[serde(default)]
    trials: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    p_missing_rss: Option<f64>,
    #[serde(default)]
    mobility: Option<RawMobility>,
    #[serde(default)]
    points: Option<RawPoints>,
    #[serde(default)]
    lattice_pitch_m: Option<f64>,
    #[serde(default)]
    sweep: Option<RawSweep>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawReferences {
    Named(String),
    Explicit(Vec<[f64; 2]>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawChannel {
    Named(String),
    Custom(RawCustomChannel),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCustomChannel {
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    k_factor: Option<f64>,
    #[serde(default)]
    toa_std_ns: Option<f64>,
    #[serde(default)]
    shadow_std_db: Option<f64>,
    #[serde(default)]
    eta: Option<f64>,
    #[serde(default)]
    g0_db: Option<f64>,
    #[serde(default)]
    mean_excess_delay_ns: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMobility {
    speed_kmh: f64,
    #[serde(default)]
    sample_interval_s: Option<f64>,
    duration_s: f64,
    #[serde(default)]
    heading: Option<RawHeading>,
    #[serde(default)]
    heading_change_period_s: Option<f64>,
    #[serde(default)]
    tracks: Option<usize>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawHeading {
    Named(String),
    Radians(f64),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawPoints {
    Named(String),
    Explicit(Vec<[f64; 2]>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    #[serde(default)]
    n_values: Option<Vec<usize>>,
    #[serde(default)]
    delta_values: Option<Vec<f64>>,
    #[serde(default)]
    p_values: Option<Vec<f64>>,
}

/// Parse and validate a JSON config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = serde_json::from_str(text)
        .map_err(|e| Error::config(parse_error_field(&e), e.to_string()))?;

    let side = raw.area_side_m;
    let references = match raw.references {
        None => ReferenceLayout::corners(side),
        Some(RawReferences::Named(s)) if s == "corners" => ReferenceLayout::corners(side),
        Some(RawReferences::Named(s)) => {
            return Err(Error::config(
                "references",
                format!("expected \"corners\" or a coordinate list, got \"{s}\""),
            ))
        }
        Some(RawReferences::Explicit(pts)) => {
            if pts.len() < MIN_REFERENCES {
                return Err(Error::config(
                    "references",
                    "reference count below minimum 3",
                ));
            }
            let pts: Vec<(f64, f64)> = pts.into_iter().map(|p| (p[0], p[1])).collect();
            ReferenceLayout::from_points(&pts)
                .map_err(|e| Error::config("references", e.to_string()))?
        }
    };

    let n_targets = raw.n_targets.unwrap_or(1);
    let spacing = raw.grid_spacing_m.unwrap_or(1.0);
    let formation = match raw.formation {
        Some(f) => f.into_iter().map(|p| (p[0], p[1])).collect(),
        None => square_formation(n_targets, spacing),
    };

    let (condition, channel) = match raw.channel {
        None => ("clear".to_string(), ChannelParams::clear()),
        Some(RawChannel::Named(s)) => match ChannelParams::preset(&s) {
            Some(p) => (s, p),
            None => {
                return Err(Error::config(
                    "channel",
                    format!("unknown preset \"{s}\" (expected \"clear\" or \"obstructed\")"),
                ))
            }
        },
        Some(RawChannel::Custom(c)) => {
            let base = match c.preset.as_deref() {
                None => ChannelParams::clear(),
                Some(s) => ChannelParams::preset(s).ok_or_else(|| {
                    Error::config("channel.preset", format!("unknown preset \"{s}\""))
                })?,
            };
            let p = ChannelParams {
                eta: c.eta.unwrap_or(base.eta),
                g0_db: c.g0_db.unwrap_or(base.g0_db),
                sigma_g_db: c.shadow_std_db.unwrap_or(base.sigma_g_db),
                sigma_tau_s: c.toa_std_ns.map(|v| v * 1e-9).unwrap_or(base.sigma_tau_s),
                k_factor: c.k_factor.unwrap_or(base.k_factor),
                mean_excess_delay_s: c
                    .mean_excess_delay_ns
                    .map(|v| v * 1e-9)
                    .unwrap_or(base.mean_excess_delay_s),
            };
            ("custom".to_string(), p)
        }
    };

    let scheme = match raw.scheme {
        None => Scheme::Cotar,
        Some(s) => Scheme::parse(&s)
            .ok_or_else(|| Error::config("scheme", format!("unknown scheme \"{s}\"")))?,
    };

    let mobility = match raw.mobility {
        None => None,
        Some(m) => {
            let heading_rad = match m.heading {
                None => None,
                Some(RawHeading::Named(s)) if s == "random" => None,
                Some(RawHeading::Named(s)) => {
                    return Err(Error::config(
                        "mobility.heading",
                        format!("expected \"random\" or radians, got \"{s}\""),
                    ))
                }
                Some(RawHeading::Radians(h)) => Some(h),
            };
            Some(MobilitySpec {
                speed_kmh: m.speed_kmh,
                sample_interval_s: m.sample_interval_s.unwrap_or(DEFAULT_SAMPLE_INTERVAL_S),
                duration_s: m.duration_s,
                heading_rad,
                heading_change_period_s: m.heading_change_period_s,
                tracks: m.tracks.unwrap_or(DEFAULT_TRACKS),
            })
        }
    };

    let points = match raw.points {
        None => EvaluationPoints::Center,
        Some(RawPoints::Named(s)) => match s.as_str() {
            "center" => EvaluationPoints::Center,
            "lattice" => EvaluationPoints::Lattice,
            _ => {
                return Err(Error::config(
                    "points",
                    format!("expected \"center\", \"lattice\" or a coordinate list, got \"{s}\""),
                ))
            }
        },
        Some(RawPoints::Explicit(p)) => {
            EvaluationPoints::Explicit(p.into_iter().map(|q| (q[0], q[1])).collect())
        }
    };

    let mut sweep = SweepSpec::default();
    if let Some(s) = raw.sweep {
        if let Some(v) = s.n_values {
            sweep.n_values = v;
        }
        if let Some(v) = s.delta_values {
            sweep.delta_values = v;
        }
        if let Some(v) = s.p_values {
            sweep.p_values = v;
        }
    }

    let cfg = ExperimentConfig {
        area_side_m: side,
        references,
        n_targets,
        grid_spacing_m: spacing,
        formation,
        condition,
        channel,
        scheme,
        iterations: raw.iterations.unwrap_or(DEFAULT_ITERATIONS),
        trials: raw.trials.unwrap_or(DEFAULT_TRIALS),
        seed: raw.seed.unwrap_or(0),
        p_missing_rss: raw.p_missing_rss.unwrap_or(0.0),
        mobility,
        points,
        lattice_pitch_m: raw.lattice_pitch_m.unwrap_or(1.0),
        sweep,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Read, parse and validate a JSON config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
        Error::config(
            "<file>",
            format!("cannot read {}: {e}", path.as_ref().display()),
        )
    })?;
    parse_config(&text)
}

fn parse_error_field(e: &serde_json::Error) -> String {
    // serde_json reports unknown/missing fields by name inside backticks.
    let msg = e.to_string();
    if let Some(start) = msg.find('`') {
        if let Some(len) = msg[start + 1..].find('`') {
            return msg[start + 1..start + 1 + len].to_string();
        }
    }
    "<root>".into()
}
