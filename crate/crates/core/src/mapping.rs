//! Robot-centric multi-elevation map.
//!
//! Every cell of a square grid that moves with the robot keeps two
//! independent Gaussian height estimates: the *floor* below the body and the
//! *ceiling* above it. Incoming depth points are classified by maximum a
//! posteriori against both layers, using the body height as the reference
//! when a layer does not exist yet, and then fused with a scalar Kalman
//! update.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Separation forced between layers when an update would make them cross.
const MIN_LAYER_SEPARATION: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MappingError {
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
    #[error("invalid map parameters: {0}")]
    InvalidParams(String),
    #[error("malformed map dump: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElevationEstimate {
    pub mean: f64,
    pub variance: f64,
    pub valid: bool,
}

impl ElevationEstimate {
    pub const INVALID: Self = Self {
        mean: 0.0,
        variance: 0.0,
        valid: false,
    };

    pub fn new(mean: f64, variance: f64) -> Self {
        Self {
            mean,
            variance,
            valid: true,
        }
    }

    /// Gaussian likelihood of a height under this estimate.
    pub fn likelihood(&self, h: f64) -> f64 {
        let d = h - self.mean;
        (-0.5 * d * d / self.variance).exp() / (2.0 * PI * self.variance).sqrt()
    }

    /// Natural log of [`likelihood`](Self::likelihood); finite far into the
    /// tails where the density itself underflows.
    pub fn log_likelihood(&self, h: f64) -> f64 {
        let d = h - self.mean;
        -0.5 * d * d / self.variance - 0.5 * (2.0 * PI * self.variance).ln()
    }
}

/// A single depth point in the map frame with its measurement variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMeasurement {
    pub point: Vector3<f64>,
    pub variance: f64,
}

/// Prior probability of each elevation, used when both layers exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElevationPrior {
    pub floor: f64,
    pub ceiling: f64,
}

impl Default for ElevationPrior {
    fn default() -> Self {
        Self {
            floor: 0.5,
            ceiling: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Classification {
    Floor,
    Ceiling,
    NewFloor,
    NewCeiling,
}

/// Assigns a height to an elevation layer.
///
/// With both layers valid this is the argmax of likelihood times prior. When
/// only one layer (or none) exists, heights above `body_z` belong to the
/// ceiling and heights at or below it to the floor.
pub fn classify(
    h: f64,
    floor: &ElevationEstimate,
    ceiling: &ElevationEstimate,
    body_z: f64,
    prior: &ElevationPrior,
) -> Classification {
    match (floor.valid, ceiling.valid) {
        (true, true) => {
            let pf = floor.log_likelihood(h) + prior.floor.ln();
            let pc = ceiling.log_likelihood(h) + prior.ceiling.ln();
            if pf >= pc {
                Classification::Floor
            } else {
                Classification::Ceiling
            }
        }
        (true, false) => {
            if h > body_z {
                Classification::NewCeiling
            } else {
                Classification::Floor
            }
        }
        (false, true) => {
            if h > body_z {
                Classification::Ceiling
            } else {
                Classification::NewFloor
            }
        }
        (false, false) => {
            if h > body_z {
                Classification::NewCeiling
            } else {
                Classification::NewFloor
            }
        }
    }
}

/// Scalar Kalman fusion of one height measurement into an estimate.
pub fn fuse(est: &ElevationEstimate, h: f64, variance: f64) -> Result<ElevationEstimate, MappingError> {
    if !(variance > 0.0) || !variance.is_finite() || !h.is_finite() {
        return Err(MappingError::InvalidMeasurement(format!(
            "height {h} with variance {variance}"
        )));
    }
    if !est.valid {
        return Ok(ElevationEstimate::new(h, variance));
    }
    let denom = variance + est.variance;
    Ok(ElevationEstimate::new(
        (variance * est.mean + est.variance * h) / denom,
        est.variance * variance / denom,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MappingParams {
    pub side_length: f64,
    pub resolution: f64,
    pub prior: ElevationPrior,
    /// Mahalanobis gate (in standard deviations) for layer reinitialisation.
    pub outlier_gate: f64,
    /// Variance added per meter of robot travel.
    pub drift_variance: f64,
}

impl Default for MappingParams {
    fn default() -> Self {
        Self {
            side_length: 6.0,
            resolution: 0.05,
            prior: ElevationPrior::default(),
            outlier_gate: 3.0,
            drift_variance: 1e-4,
        }
    }
}

impl MappingParams {
    pub fn validate(&self) -> Result<(), MappingError> {
        let bad = |m: &str| Err(MappingError::InvalidParams(m.to_string()));
        if !(self.resolution > 0.0) || !(self.side_length > 0.0) {
            return bad("side_length and resolution must be positive");
        }
        let cells = self.side_length / self.resolution;
        if (cells - cells.round()).abs() > 1e-6 {
            return bad("side_length must be a multiple of resolution");
        }
        if !(self.prior.floor > 0.0 && self.prior.ceiling > 0.0) {
            return bad("elevation priors must be positive");
        }
        if !(self.outlier_gate > 0.0) || self.drift_variance < 0.0 {
            return bad("outlier_gate must be positive and drift_variance non-negative");
        }
        Ok(())
    }

    pub fn cells_per_side(&self) -> usize {
        (self.side_length / self.resolution).round() as usize
    }
}

/// Per-scan bookkeeping returned by [`MultiElevationMap::ingest_scan`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScanStats {
    pub floor: usize,
    pub ceiling: usize,
    pub new_floor: usize,
    pub new_ceiling: usize,
    /// Points that replaced an existing layer estimate.
    pub reinitialized: usize,
    /// Points rejected by the gate on the far side of a layer.
    pub rejected: usize,
    pub out_of_grid: usize,
}

impl ScanStats {
    pub fn accepted(&self) -> usize {
        self.floor + self.ceiling + self.new_floor + self.new_ceiling
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    Floor,
    Ceiling,
}

/// Robot-centric two-layer elevation grid.
///
/// The grid has `n x n` cells whose boundaries sit on multiples of the
/// resolution. The center stays within one cell of the robot.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiElevationMap {
    params: MappingParams,
    n: usize,
    center: (f64, f64),
    floor: Vec<ElevationEstimate>,
    ceiling: Vec<ElevationEstimate>,
}

impl MultiElevationMap {
    pub fn new(params: MappingParams, center: (f64, f64)) -> Result<Self, MappingError> {
        params.validate()?;
        let n = params.cells_per_side();
        let res = params.resolution;
        let half = n as f64 * res / 2.0;
        let snap = |v: f64| ((v - half) / res).round() * res + half;
        Ok(Self {
            params,
            n,
            center: (snap(center.0), snap(center.1)),
            floor: vec![ElevationEstimate::INVALID; n * n],
            ceiling: vec![ElevationEstimate::INVALID; n * n],
        })
    }

    pub fn params(&self) -> &MappingParams {
        &self.params
    }

    pub fn center(&self) -> (f64, f64) {
        self.center
    }

    pub fn cells_per_side(&self) -> usize {
        self.n
    }

    pub fn resolution(&self) -> f64 {
        self.params.resolution
    }

    /// Lower-left corner of the grid.
    pub fn min_corner(&self) -> (f64, f64) {
        let half = self.params.side_length / 2.0;
        (self.center.0 - half, self.center.1 - half)
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (x0, y0) = self.min_corner();
        let res = self.params.resolution;
        let ix = ((x - x0) / res).floor();
        let iy = ((y - y0) / res).floor();
        if ix < 0.0 || iy < 0.0 || ix >= self.n as f64 || iy >= self.n as f64 {
            return None;
        }
        Some((ix as usize, iy as usize))
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        let (x0, y0) = self.min_corner();
        let res = self.params.resolution;
        (x0 + (ix as f64 + 0.5) * res, y0 + (iy as f64 + 0.5) * res)
    }

    fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.n + ix
    }

    pub fn floor(&self, ix: usize, iy: usize) -> &ElevationEstimate {
        &self.floor[self.index(ix, iy)]
    }

    pub fn ceiling(&self, ix: usize, iy: usize) -> &ElevationEstimate {
        &self.ceiling[self.index(ix, iy)]
    }

    /// Overwrites a cell, e.g. to seed a map from known geometry.
    pub fn set_cell(&mut self, ix: usize, iy: usize, floor: ElevationEstimate, ceiling: ElevationEstimate) {
        let i = self.index(ix, iy);
        self.floor[i] = floor;
        self.ceiling[i] = ceiling;
    }

    /// Classifies and fuses a batch of depth points.
    ///
    /// Points are grouped per cell and processed from the highest down, so
    /// surfaces that reach above the body seed the ceiling before the lower
    /// part of the same face is seen. A point far beyond its layer on the
    /// open side (above the floor, below the ceiling) starts a new estimate
    /// there; a point far on the other side only replaces the estimate when it
    /// is more precise, otherwise it is rejected. A point far from both layers
    /// in the band between them goes to the side of `body_z` it lies on.
    pub fn ingest_scan(&mut self, points: &[DepthMeasurement], body_z: f64) -> Result<ScanStats, MappingError> {
        let mut stats = ScanStats::default();
        let mut binned: Vec<(usize, usize)> = Vec::with_capacity(points.len());
        for (k, m) in points.iter().enumerate() {
            if !(m.variance > 0.0) || !m.variance.is_finite() || !m.point.iter().all(|v| v.is_finite()) {
                return Err(MappingError::InvalidMeasurement(format!("point {k}")));
            }
            match self.cell_of(m.point.x, m.point.y) {
                Some((ix, iy)) => binned.push((self.index(ix, iy), k)),
                None => stats.out_of_grid += 1,
            }
        }
        binned.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then(points[b.1].point.z.total_cmp(&points[a.1].point.z))
                .then(a.1.cmp(&b.1))
        });

        let gate = self.params.outlier_gate;
        for (cell, k) in binned {
            let m = &points[k];
            let h = m.point.z;
            let mut class = classify(h, &self.floor[cell], &self.ceiling[cell], body_z, &self.params.prior);
            if self.floor[cell].valid && self.ceiling[cell].valid {
                let (f, c) = (self.floor[cell], self.ceiling[cell]);
                let beyond_floor = h - f.mean > gate * (f.variance + m.variance).sqrt();
                let beyond_ceiling = c.mean - h > gate * (c.variance + m.variance).sqrt();
                if beyond_floor && beyond_ceiling {
                    class = if h > body_z {
                        Classification::Ceiling
                    } else {
                        Classification::Floor
                    };
                }
            }
            let layer = match class {
                Classification::Floor | Classification::NewFloor => Layer::Floor,
                Classification::Ceiling | Classification::NewCeiling => Layer::Ceiling,
            };
            match class {
                Classification::Floor => stats.floor += 1,
                Classification::Ceiling => stats.ceiling += 1,
                Classification::NewFloor => stats.new_floor += 1,
                Classification::NewCeiling => stats.new_ceiling += 1,
            }
            let est = match layer {
                Layer::Floor => self.floor[cell],
                Layer::Ceiling => self.ceiling[cell],
            };
            let updated = if !est.valid {
                ElevationEstimate::new(h, m.variance)
            } else {
                let sigma = (est.variance + m.variance).sqrt();
                // positive when the point lies on the open side of the layer
                let open = match layer {
                    Layer::Floor => h - est.mean,
                    Layer::Ceiling => est.mean - h,
                };
                if open > gate * sigma {
                    stats.reinitialized += 1;
                    ElevationEstimate::new(h, m.variance)
                } else if open < -gate * sigma {
                    if m.variance < est.variance {
                        stats.reinitialized += 1;
                        ElevationEstimate::new(h, m.variance)
                    } else {
                        stats.rejected += 1;
                        continue;
                    }
                } else {
                    fuse(&est, h, m.variance)?
                }
            };
            match layer {
                Layer::Floor => {
                    self.floor[cell] = updated;
                    let c = &mut self.ceiling[cell];
                    if c.valid && c.mean <= updated.mean {
                        c.mean = updated.mean + MIN_LAYER_SEPARATION;
                    }
                }
                Layer::Ceiling => {
                    self.ceiling[cell] = updated;
                    let f = &mut self.floor[cell];
                    if f.valid && updated.mean <= f.mean {
                        f.mean = updated.mean - MIN_LAYER_SEPARATION;
                    }
                }
            }
        }
        Ok(stats)
    }

    /// Moves the grid so it stays centered on the robot.
    ///
    /// The grid shifts by whole cells only; a move of less than one cell
    /// leaves it untouched. Retained cells keep their data unchanged and
    /// cells entering the window start invalid.
    pub fn recenter(&mut self, new_center: (f64, f64)) {
        let res = self.params.resolution;
        let whole = |d: f64| {
            let c = d / res;
            (c + 1e-9 * c.signum()).trunc() as i64
        };
        let sx = whole(new_center.0 - self.center.0);
        let sy = whole(new_center.1 - self.center.1);
        if sx == 0 && sy == 0 {
            return;
        }
        self.center = (self.center.0 + sx as f64 * res, self.center.1 + sy as f64 * res);
        let n = self.n as i64;
        let shift = |layer: &[ElevationEstimate]| {
            let mut out = vec![ElevationEstimate::INVALID; layer.len()];
            for iy in 0..n {
                let oy = iy + sy;
                if oy < 0 || oy >= n {
                    continue;
                }
                for ix in 0..n {
                    let ox = ix + sx;
                    if ox < 0 || ox >= n {
                        continue;
                    }
                    out[(iy * n + ix) as usize] = layer[(oy * n + ox) as usize];
                }
            }
            out
        };
        self.floor = shift(&self.floor);
        self.ceiling = shift(&self.ceiling);
    }

    /// Inflates all valid variances for `distance` meters of robot travel.
    pub fn propagate_motion(&mut self, distance: f64) {
        let add = self.params.drift_variance * distance.abs();
        if add == 0.0 {
            return;
        }
        for e in self.floor.iter_mut().chain(self.ceiling.iter_mut()) {
            if e.valid {
                e.variance += add;
            }
        }
    }

    pub fn snapshot(&self) -> MapSnapshot {
        MapSnapshot {
            center: self.center,
            side_length: self.params.side_length,
            resolution: self.params.resolution,
            cells: self.n,
            floor: self.floor.clone(),
            ceiling: self.ceiling.clone(),
        }
    }
}

/// Immutable copy of the map layers handed to the distance-field builder.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSnapshot {
    pub center: (f64, f64),
    pub side_length: f64,
    pub resolution: f64,
    pub cells: usize,
    /// Row-major, `iy * cells + ix`.
    pub floor: Vec<ElevationEstimate>,
    pub ceiling: Vec<ElevationEstimate>,
}

impl MapSnapshot {
    pub fn min_corner(&self) -> (f64, f64) {
        let half = self.side_length / 2.0;
        (self.center.0 - half, self.center.1 - half)
    }

    pub fn is_empty(&self) -> bool {
        self.floor.iter().chain(self.ceiling.iter()).all(|e| !e.valid)
    }

    /// Text dump: a header line followed by four row-major layers
    /// (floor mean, floor variance, ceiling mean, ceiling variance).
    /// Invalid entries are written as `nan`.
    pub fn to_dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "elevation-map v1 center_x={} center_y={} side_length={} resolution={} cells={}",
            self.center.0, self.center.1, self.side_length, self.resolution, self.cells
        );
        let layers: [(&str, &[ElevationEstimate], bool); 4] = [
            ("floor_mean", &self.floor, true),
            ("floor_variance", &self.floor, false),
            ("ceiling_mean", &self.ceiling, true),
            ("ceiling_variance", &self.ceiling, false),
        ];
        for (name, data, mean) in layers {
            let _ = writeln!(out, "layer {name}");
            for row in data.chunks(self.cells) {
                let line: Vec<String> = row
                    .iter()
                    .map(|e| match (e.valid, mean) {
                        (false, _) => "nan".to_string(),
                        (true, true) => format!("{}", e.mean),
                        (true, false) => format!("{}", e.variance),
                    })
                    .collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        out
    }

    pub fn from_dump(text: &str) -> Result<Self, MappingError> {
        let err = |m: String| MappingError::Parse(m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err("empty dump".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("elevation-map") || fields.next() != Some("v1") {
            return Err(err("bad header".into()));
        }
        let mut get = |key: &str| -> Result<f64, MappingError> {
            let f = fields.next().ok_or_else(|| err(format!("missing {key}")))?;
            let v = f
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| err(format!("expected {key}")))?;
            v.parse::<f64>().map_err(|e| err(format!("{key}: {e}")))
        };
        let cx = get("center_x")?;
        let cy = get("center_y")?;
        let side_length = get("side_length")?;
        let resolution = get("resolution")?;
        let cells = get("cells")? as usize;
        let mut layers: Vec<Vec<f64>> = Vec::new();
        for name in ["floor_mean", "floor_variance", "ceiling_mean", "ceiling_variance"] {
            let tag = lines.next().ok_or_else(|| err(format!("missing layer {name}")))?;
            if tag.trim() != format!("layer {name}") {
                return Err(err(format!("expected layer {name}, found {tag:?}")));
            }
            let mut values = Vec::with_capacity(cells * cells);
            for r in 0..cells {
                let row = lines.next().ok_or_else(|| err(format!("{name}: missing row {r}")))?;
                for tok in row.split_whitespace() {
                    values.push(tok.parse::<f64>().map_err(|e| err(format!("{name}: {e}")))?);
                }
            }
            if values.len() != cells * cells {
                return Err(err(format!("{name}: expected {} values", cells * cells)));
            }
            layers.push(values);
        }
        let combine = |mean: &[f64], var: &[f64]| -> Vec<ElevationEstimate> {
            mean.iter()
                .zip(var)
                .map(|(&m, &v)| {
                    if m.is_nan() {
                        ElevationEstimate::INVALID
                    } else {
                        ElevationEstimate::new(m, v)
                    }
                })
                .collect()
        };
        Ok(Self {
            center: (cx, cy),
            side_length,
            resolution,
            cells,
            floor: combine(&layers[0], &layers[1]),
            ceiling: combine(&layers[2], &layers[3]),
        })
    }
}
