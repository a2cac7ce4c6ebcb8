//! Occupancy extrusion, exact signed distance field and CHOMP obstacle cost.

use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapping::MapSnapshot;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("query point ({0:.3}, {1:.3}, {2:.3}) outside the distance field")]
    OutOfBounds(f64, f64, f64),
    #[error("invalid field parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdfParams {
    pub z_min: f64,
    pub z_max: f64,
    /// Distances are clamped to `[-max_distance, max_distance]`.
    pub max_distance: f64,
    /// Columns whose floor and ceiling are closer than this are solid. The
    /// default is just above the body height, so it only fills columns the
    /// box could never enter.
    pub min_free_band: f64,
    /// Observed columns also fill unobserved columns within this horizontal
    /// distance, giving seen surfaces a minimum thickness.
    pub surface_depth: f64,
}

impl Default for SdfParams {
    fn default() -> Self {
        Self {
            z_min: 0.0,
            z_max: 1.0,
            max_distance: 2.0,
            min_free_band: 0.15,
            surface_depth: 0.2,
        }
    }
}

impl SdfParams {
    pub fn validate(&self) -> Result<(), FieldError> {
        if !(self.z_max > self.z_min) || !(self.max_distance > 0.0) {
            return Err(FieldError::InvalidParams(
                "z_max must exceed z_min and max_distance must be positive".into(),
            ));
        }
        if !(self.min_free_band >= 0.0) || !(self.surface_depth >= 0.0) {
            return Err(FieldError::InvalidParams(
                "min_free_band and surface_depth must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Axis-aligned voxel grid geometry shared by occupancy and distance grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    /// Minimum corner of the grid.
    pub origin: Vector3<f64>,
    pub dims: [usize; 3],
    pub resolution: f64,
}

impl GridGeometry {
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.dims[1] + iy) * self.dims[0] + ix
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        self.origin + Vector3::new(ix as f64 + 0.5, iy as f64 + 0.5, iz as f64 + 0.5) * self.resolution
    }

    pub fn max_corner(&self) -> Vector3<f64> {
        self.origin
            + Vector3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.resolution
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let hi = self.max_corner();
        (0..3).all(|i| p[i] >= self.origin[i] && p[i] <= hi[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub geometry: GridGeometry,
    pub occupied: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new_free(geometry: GridGeometry) -> Self {
        Self {
            occupied: vec![false; geometry.len()],
            geometry,
        }
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> bool {
        self.occupied[self.geometry.index(ix, iy, iz)]
    }

    pub fn set(&mut self, ix: usize, iy: usize, iz: usize, value: bool) {
        let i = self.geometry.index(ix, iy, iz);
        self.occupied[i] = value;
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }
}

/// Turns a map snapshot into voxel occupancy over `[z_min, z_max]`.
///
/// A voxel is occupied when its center lies below the cell's floor mean or
/// above its ceiling mean. A free band thinner than `min_free_band` between a
/// valid floor and ceiling is filled, which keeps vertical faces solid.
/// Columns with no valid layer and no observed free neighbor take the union
/// of the observed columns within `surface_depth`. All other unobserved space
/// is free.
pub fn extrude_occupancy(snapshot: &MapSnapshot, params: &SdfParams) -> Result<OccupancyGrid, FieldError> {
    params.validate()?;
    let res = snapshot.resolution;
    let nz = ((params.z_max - params.z_min) / res).round().max(1.0) as usize;
    let (x0, y0) = snapshot.min_corner();
    let geometry = GridGeometry {
        origin: Vector3::new(x0, y0, params.z_min),
        dims: [snapshot.cells, snapshot.cells, nz],
        resolution: res,
    };
    let mut grid = OccupancyGrid::new_free(geometry);
    let n = snapshot.cells;
    let column = |i: usize| -> Option<Vec<bool>> {
        let floor = snapshot.floor[i];
        let ceiling = snapshot.ceiling[i];
        if !floor.valid && !ceiling.valid {
            return None;
        }
        if floor.valid && ceiling.valid && ceiling.mean - floor.mean < params.min_free_band {
            return Some(vec![true; nz]);
        }
        Some(
            (0..nz)
                .map(|iz| {
                    let zc = params.z_min + (iz as f64 + 0.5) * res;
                    (floor.valid && zc < floor.mean) || (ceiling.valid && zc > ceiling.mean)
                })
                .collect(),
        )
    };
    let columns: Vec<Option<Vec<bool>>> = (0..n * n).map(column).collect();
    let reach = (params.surface_depth / res + 1e-9).floor() as i64;
    let at = |jx: i64, jy: i64| -> Option<&Vec<bool>> {
        if jx < 0 || jy < 0 || jx >= n as i64 || jy >= n as i64 {
            return None;
        }
        columns[jy as usize * n + jx as usize].as_ref()
    };
    for iy in 0..n {
        for ix in 0..n {
            if let Some(col) = &columns[iy * n + ix] {
                for (iz, &occ) in col.iter().enumerate() {
                    if occ {
                        grid.set(ix, iy, iz, true);
                    }
                }
                continue;
            }
            let (ix, iy) = (ix as i64, iy as i64);
            let seen_free = (-1..=1)
                .flat_map(|dy| (-1..=1).map(move |dx| (dx, dy)))
                .any(|(dx, dy)| at(ix + dx, iy + dy).is_some_and(|col| !col.contains(&true)));
            if seen_free {
                continue;
            }
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    if dx * dx + dy * dy > reach * reach {
                        continue;
                    }
                    if let Some(col) = at(ix + dx, iy + dy) {
                        for (iz, &occ) in col.iter().enumerate() {
                            if occ {
                                grid.set(ix as usize, iy as usize, iz, true);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
///
/// `f` holds the input costs, `f64::INFINITY` marking non-sites. `out`
/// receives `min_q f[q] + (p - q)^2`. Scratch buffers are passed in so the
/// caller can reuse them across scanlines.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let qf = q as f64;
                    let pf = p as f64;
                    let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let pf = p as f64;
        while k + 1 < v.len() && z[k + 1] < pf {
            k += 1;
        }
        let d = pf - v[k] as f64;
        *o = f[v[k]] + d * d;
    }
}

/// Exact squared Euclidean distance (in voxel units) from every voxel to the
/// nearest voxel with `site == true`. Voxels with no site anywhere get
/// infinity.
pub fn squared_edt(dims: [usize; 3], site: &[bool]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut g: Vec<f64> = site.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let max_n = nx.max(ny).max(nz);
    let mut line = vec![0.0; max_n];
    let mut out = vec![0.0; max_n];
    let mut v = Vec::with_capacity(max_n);
    let mut z = Vec::with_capacity(max_n);
    let idx = |ix: usize, iy: usize, iz: usize| (iz * ny + iy) * nx + ix;

    for iz in 0..nz {
        for iy in 0..ny {
            let base = idx(0, iy, iz);
            line[..nx].copy_from_slice(&g[base..base + nx]);
            edt_1d(&line[..nx], &mut out[..nx], &mut v, &mut z);
            g[base..base + nx].copy_from_slice(&out[..nx]);
        }
    }
    for iz in 0..nz {
        for ix in 0..nx {
            for iy in 0..ny {
                line[iy] = g[idx(ix, iy, iz)];
            }
            edt_1d(&line[..ny], &mut out[..ny], &mut v, &mut z);
            for iy in 0..ny {
                g[idx(ix, iy, iz)] = out[iy];
            }
        }
    }
    for iy in 0..ny {
        for ix in 0..nx {
            for iz in 0..nz {
                line[iz] = g[idx(ix, iy, iz)];
            }
            edt_1d(&line[..nz], &mut out[..nz], &mut v, &mut z);
            for iz in 0..nz {
                g[idx(ix, iy, iz)] = out[iz];
            }
        }
    }
    g
}

/// Anything that can report a signed distance and its spatial gradient.
pub trait DistanceSource {
    fn distance(&self, p: &Vector3<f64>) -> Result<f64, FieldError>;
    fn distance_gradient(&self, p: &Vector3<f64>) -> Result<(f64, Vector3<f64>), FieldError>;
}

/// Signed distance field over a voxel grid, positive in free space.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    pub geometry: GridGeometry,
    pub distance: Vec<f64>,
    pub max_distance: f64,
}

/// Builds the signed distance field of an occupancy grid.
///
/// Distances are measured between voxel centers: a free voxel next to an
/// occupied one reads `+resolution`, and the occupied one `-resolution`.
pub fn build_sdf(occ: &OccupancyGrid, max_distance: f64) -> SdfGrid {
    let geometry = occ.geometry;
    let free: Vec<bool> = occ.occupied.iter().map(|&o| !o).collect();
    let to_obstacle = squared_edt(geometry.dims, &occ.occupied);
    let to_free = squared_edt(geometry.dims, &free);
    let res = geometry.resolution;
    let distance = to_obstacle
        .iter()
        .zip(&to_free)
        .map(|(&a, &b)| (res * (a.sqrt() - b.sqrt())).clamp(-max_distance, max_distance))
        .collect();
    SdfGrid {
        geometry,
        distance,
        max_distance,
    }
}

impl SdfGrid {
    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.distance[self.geometry.index(ix, iy, iz)]
    }

    /// Trilinear interpolation, extending the outermost voxel values to the
    /// grid boundary. `p` must already be inside the grid box.
    fn interpolate(&self, p: &Vector3<f64>) -> f64 {
        let g = &self.geometry;
        let mut i0 = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let u = (p[a] - g.origin[a]) / g.resolution - 0.5;
            let max = (g.dims[a] - 1) as f64;
            let u = u.clamp(0.0, max);
            let f = u.floor().min((g.dims[a].max(2) - 2) as f64).max(0.0);
            i0[a] = f as usize;
            t[a] = if g.dims[a] > 1 { u - f } else { 0.0 };
        }
        let step = |a: usize| usize::from(g.dims[a] > 1);
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut ix = [0usize; 3];
            for a in 0..3 {
                let hi = (corner >> a) & 1 == 1;
                ix[a] = i0[a] + if hi { step(a) } else { 0 };
                w *= if hi { t[a] } else { 1.0 - t[a] };
            }
            if w != 0.0 {
                acc += w * self.at(ix[0], ix[1], ix[2]);
            }
        }
        acc
    }

    fn clamp_into(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let lo = self.geometry.origin;
        let hi = self.geometry.max_corner();
        Vector3::new(p.x.clamp(lo.x, hi.x), p.y.clamp(lo.y, hi.y), p.z.clamp(lo.z, hi.z))
    }

    pub fn distance_at(&self, p: &Vector3<f64>) -> Result<f64, FieldError> {
        if !self.geometry.contains(p) {
            return Err(FieldError::OutOfBounds(p.x, p.y, p.z));
        }
        Ok(self.interpolate(p))
    }

    /// Interpolated distance and its central-difference gradient.
    pub fn query(&self, p: &Vector3<f64>) -> Result<(f64, Vector3<f64>), FieldError> {
        let d = self.distance_at(p)?;
        let h = self.geometry.resolution / 2.0;
        let mut grad = Vector3::zeros();
        for a in 0..3 {
            let mut hi = *p;
            let mut lo = *p;
            hi[a] += h;
            lo[a] -= h;
            let hi = self.clamp_into(&hi);
            let lo = self.clamp_into(&lo);
            let span = hi[a] - lo[a];
            if span > 0.0 {
                grad[a] = (self.interpolate(&hi) - self.interpolate(&lo)) / span;
            }
        }
        Ok((d, grad))
    }

    pub fn to_dump(&self) -> String {
        let g = &self.geometry;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "sdf v1 origin_x={} origin_y={} origin_z={} nx={} ny={} nz={} resolution={}",
            g.origin.x, g.origin.y, g.origin.z, g.dims[0], g.dims[1], g.dims[2], g.resolution
        );
        for row in self.distance.chunks(g.dims[0]) {
            let line: Vec<String> = row.iter().map(|d| format!("{d}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    /// Horizontal slice through the voxel layer containing height `z`, as
    /// CSV with columns `x,y,z,distance`.
    pub fn slice_z_csv(&self, z: f64) -> Result<String, FieldError> {
        let g = &self.geometry;
        let probe = Vector3::new(g.origin.x, g.origin.y, z);
        if !g.contains(&probe) {
            return Err(FieldError::OutOfBounds(probe.x, probe.y, z));
        }
        let iz = (((z - g.origin.z) / g.resolution).floor() as usize).min(g.dims[2] - 1);
        let mut out = String::from("x,y,z,distance\n");
        for iy in 0..g.dims[1] {
            for ix in 0..g.dims[0] {
                let c = g.voxel_center(ix, iy, iz);
                let _ = writeln!(out, "{},{},{},{}", c.x, c.y, c.z, self.at(ix, iy, iz));
            }
        }
        Ok(out)
    }
}

impl DistanceSource for SdfGrid {
    fn distance(&self, p: &Vector3<f64>) -> Result<f64, FieldError> {
        self.distance_at(p)
    }

    fn distance_gradient(&self, p: &Vector3<f64>) -> Result<(f64, Vector3<f64>), FieldError> {
        self.query(p)
    }
}

/// CHOMP obstacle cost of a signed distance and its derivative.
pub fn obstacle_cost(d: f64, eps: f64) -> (f64, f64) {
    if d < 0.0 {
        (-d + eps / 2.0, -1.0)
    } else if d <= eps {
        let e = d - eps;
        (e * e / (2.0 * eps), e / eps)
    } else {
        (0.0, 0.0)
    }
}

/// Obstacle cost at a point together with its workspace gradient.
pub fn obstacle_cost_gradient<F: DistanceSource + ?Sized>(
    field: &F,
    p: &Vector3<f64>,
    eps: f64,
) -> Result<(f64, Vector3<f64>), FieldError> {
    let d = field.distance(p)?;
    if d >= eps {
        return Ok((0.0, Vector3::zeros()));
    }
    let (d, grad) = field.distance_gradient(p)?;
    let (c, dc) = obstacle_cost(d, eps);
    Ok((c, grad * dc))
}
