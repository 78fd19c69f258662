//! Voxel-domain geometry, measurement series, collocation sampling and the
//! on-disk dataset format.
//!
//! Voxels are addressed row-major with `x` fastest. Voxel `(i, j, k)` has its
//! center at `(i, j, k) * spacing` mm. Interior and boundary voxels are
//! classified by 6-connectivity; an axis of extent 1 is treated as
//! degenerate (no neighbors along it), which turns a `1 x 1 x N` grid into a
//! rod and a `N x M x 1` grid into a slab.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Current dataset file format version.
pub const FORMAT_VERSION: u32 = 1;

/// Sentinel for "no such voxel" in index tables.
pub const NONE: usize = usize::MAX;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("empty domain")]
    EmptyDomain,
    #[error("invalid dims {0:?}")]
    InvalidDims([usize; 3]),
    #[error("invalid spacing {0}")]
    InvalidSpacing(f64),
    #[error("occupancy length {got} does not match dims product {expected}")]
    OccupancyLength { expected: usize, got: usize },
    #[error("domain has no interior voxels")]
    NoInterior,
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("final time must be positive, got {0}")]
    InvalidFinalTime(f64),
    #[error("degenerate data: maximum value is {0}")]
    DegenerateData(f64),
    #[error("negative concentration {value} at timepoint {timepoint}, voxel {voxel}")]
    NegativeValue {
        timepoint: usize,
        voxel: usize,
        value: f64,
    },
    #[error("invalid series: {0}")]
    InvalidSeries(String),
    #[error("unknown format version {0}")]
    UnknownVersion(u32),
    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    PayloadSizeMismatch { expected: usize, found: usize },
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GridError>;

/// Binary occupancy grid with isotropic spacing (mm per voxel edge).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMask {
    dims: [usize; 3],
    spacing: f64,
    occupancy: Vec<bool>,
}

impl VoxelMask {
    pub fn new(dims: [usize; 3], spacing: f64, occupancy: Vec<bool>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(GridError::InvalidDims(dims));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(GridError::InvalidSpacing(spacing));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if occupancy.len() != expected {
            return Err(GridError::OccupancyLength {
                expected,
                got: occupancy.len(),
            });
        }
        Ok(Self {
            dims,
            spacing,
            occupancy,
        })
    }

    /// Builds a mask by evaluating `inside` at every voxel index.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: f64,
        mut inside: impl FnMut(usize, usize, usize) -> bool,
    ) -> Result<Self> {
        let mut occupancy = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    occupancy.push(inside(i, j, k));
                }
            }
        }
        Self::new(dims, spacing, occupancy)
    }

    /// Fully occupied box.
    pub fn full(dims: [usize; 3], spacing: f64) -> Result<Self> {
        Self::from_fn(dims, spacing, |_, _, _| true)
    }

    /// Ball of `radius` voxels centered in a cube of `2 * radius` voxels per side.
    pub fn ball(radius: usize, spacing: f64) -> Result<Self> {
        Self::shell(radius, 0, spacing)
    }

    /// Spherical shell between `inner` and `outer` radii (voxels), centered in
    /// a cube of `2 * outer` voxels per side.
    pub fn shell(outer: usize, inner: usize, spacing: f64) -> Result<Self> {
        let n = 2 * outer;
        let c = (n as f64 - 1.0) / 2.0;
        let (ro, ri) = (outer as f64, inner as f64);
        Self::from_fn([n, n, n], spacing, |i, j, k| {
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2);
            r2 <= ro * ro && (inner == 0 || r2 >= ri * ri)
        })
    }

    /// Cube of side `n` with a centered cubic cavity of side `cavity`.
    pub fn cube_with_cavity(n: usize, cavity: usize, spacing: f64) -> Result<Self> {
        let lo = (n.saturating_sub(cavity)) / 2;
        let hi = lo + cavity;
        Self::from_fn([n, n, n], spacing, |i, j, k| {
            !((lo..hi).contains(&i) && (lo..hi).contains(&j) && (lo..hi).contains(&k))
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    #[inline]
    pub fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn ijk(&self, linear: usize) -> [usize; 3] {
        let i = linear % self.dims[0];
        let rest = linear / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Occupancy lookup that treats out-of-range indices as unoccupied.
    pub fn occupied(&self, i: isize, j: isize, k: isize) -> bool {
        if i < 0 || j < 0 || k < 0 {
            return false;
        }
        let (i, j, k) = (i as usize, j as usize, k as usize);
        if i >= self.dims[0] || j >= self.dims[1] || k >= self.dims[2] {
            return false;
        }
        self.occupancy[self.linear(i, j, k)]
    }

    /// Axes with more than one voxel; only these carry neighbors.
    pub fn active_axes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..3).filter(|&a| self.dims[a] > 1)
    }
}

/// A classified voxel domain: occupied voxels in row-major order, split into
/// interior voxels (every neighbor occupied) and boundary voxels.
#[derive(Debug, Clone)]
pub struct Domain {
    mask: VoxelMask,
    occupied: Vec<usize>,
    occupied_pos: Vec<usize>,
    interior: Vec<usize>,
    boundary: Vec<usize>,
    role_pos: Vec<usize>,
    neighbors: Vec<[usize; 6]>,
}

/// Whether an occupied voxel is a free unknown or sits on the domain boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Interior(usize),
    Boundary(usize),
}

/// Splits the occupied voxels of `mask` into interior and boundary sets.
pub fn classify_voxels(mask: &VoxelMask) -> Result<Domain> {
    Domain::new(mask.clone())
}

impl Domain {
    pub fn new(mask: VoxelMask) -> Result<Self> {
        let occupied: Vec<usize> = (0..mask.len()).filter(|&l| mask.occupancy[l]).collect();
        if occupied.is_empty() {
            return Err(GridError::EmptyDomain);
        }
        let mut occupied_pos = vec![NONE; mask.len()];
        for (p, &l) in occupied.iter().enumerate() {
            occupied_pos[l] = p;
        }

        let mut neighbors = Vec::with_capacity(occupied.len());
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        let mut role_pos = Vec::with_capacity(occupied.len());
        for (p, &l) in occupied.iter().enumerate() {
            let [i, j, k] = mask.ijk(l);
            let mut nb = [NONE; 6];
            let mut closed = true;
            for axis in mask.active_axes() {
                for (side, step) in [(0usize, -1isize), (1, 1)] {
                    let mut c = [i as isize, j as isize, k as isize];
                    c[axis] += step;
                    if mask.occupied(c[0], c[1], c[2]) {
                        let nl = mask.linear(c[0] as usize, c[1] as usize, c[2] as usize);
                        nb[2 * axis + side] = occupied_pos[nl];
                    } else {
                        closed = false;
                    }
                }
            }
            neighbors.push(nb);
            if closed {
                role_pos.push(interior.len());
                interior.push(p);
            } else {
                role_pos.push(boundary.len());
                boundary.push(p);
            }
        }

        Ok(Self {
            mask,
            occupied,
            occupied_pos,
            interior,
            boundary,
            role_pos,
            neighbors,
        })
    }

    pub fn mask(&self) -> &VoxelMask {
        &self.mask
    }

    pub fn spacing(&self) -> f64 {
        self.mask.spacing
    }

    pub fn n_occupied(&self) -> usize {
        self.occupied.len()
    }

    /// Linear voxel indices of the occupied voxels, row-major.
    pub fn occupied(&self) -> &[usize] {
        &self.occupied
    }

    /// Position in the occupied list of linear voxel `l`, or [`NONE`].
    pub fn occupied_pos(&self, l: usize) -> usize {
        self.occupied_pos[l]
    }

    /// Occupied-list positions of interior voxels.
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    /// Occupied-list positions of boundary voxels.
    pub fn boundary(&self) -> &[usize] {
        &self.boundary
    }

    pub fn role(&self, occ: usize) -> Role {
        let pos = self.role_pos[occ];
        if self.interior.get(pos) == Some(&occ) {
            Role::Interior(pos)
        } else {
            Role::Boundary(pos)
        }
    }

    /// Occupied neighbors of an occupied voxel as `[-x, +x, -y, +y, -z, +z]`,
    /// [`NONE`] where absent.
    pub fn neighbors(&self, occ: usize) -> &[usize; 6] {
        &self.neighbors[occ]
    }

    /// Number of axes that carry a stencil.
    pub fn active_axis_count(&self) -> usize {
        self.mask.active_axes().count()
    }

    /// Physical center (mm) of an occupied voxel.
    pub fn center(&self, occ: usize) -> [f64; 3] {
        let [i, j, k] = self.mask.ijk(self.occupied[occ]);
        let s = self.mask.spacing;
        [i as f64 * s, j as f64 * s, k as f64 * s]
    }

    /// Adjacent boundary-voxel pairs `(a, b)` with `a < b`, as positions in
    /// the boundary list.
    pub fn boundary_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for (a, &occ) in self.boundary.iter().enumerate() {
            for &nb in self.neighbors[occ].iter().filter(|&&n| n != NONE) {
                if let Role::Boundary(b) = self.role(nb) {
                    if a < b {
                        edges.push((a, b));
                    }
                }
            }
        }
        edges
    }

    /// Pairs `(boundary position, interior position)` of adjacent voxels.
    pub fn boundary_interior_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for (a, &occ) in self.boundary.iter().enumerate() {
            for &nb in self.neighbors[occ].iter().filter(|&&n| n != NONE) {
                if let Role::Interior(i) = self.role(nb) {
                    edges.push((a, i));
                }
            }
        }
        edges
    }

    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox::from_domain(self)
    }
}

/// Axis-aligned box used to normalize network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

impl BoundingBox {
    /// Smallest box containing every occupied voxel cube (centers +- half a
    /// spacing), so that jittered collocation points stay inside it.
    pub fn from_domain(domain: &Domain) -> Self {
        let half = 0.5 * domain.spacing();
        let mut lower = [f64::INFINITY; 3];
        let mut upper = [f64::NEG_INFINITY; 3];
        for occ in 0..domain.n_occupied() {
            let c = domain.center(occ);
            for a in 0..3 {
                lower[a] = lower[a].min(c[a] - half);
                upper[a] = upper[a].max(c[a] + half);
            }
        }
        Self { lower, upper }
    }

    pub fn contains(&self, x: &[f64; 3]) -> bool {
        (0..3).all(|a| self.lower[a] <= x[a] && x[a] <= self.upper[a])
    }
}

/// A space-time collocation or observation location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub x: [f64; 3],
    pub t: f64,
}

/// Draws `count` collocation points: each takes a uniformly chosen interior
/// voxel center jittered by `U[-s/2, s/2]` per axis, with times forming a
/// latin hypercube over `[0, t_final]` (one sample per stratum).
pub fn sample_pde_points(
    domain: &Domain,
    count: usize,
    t_final: f64,
    seed: u64,
) -> Result<Vec<SamplePoint>> {
    if count == 0 {
        return Err(GridError::NoSamples);
    }
    if !(t_final.is_finite() && t_final > 0.0) {
        return Err(GridError::InvalidFinalTime(t_final));
    }
    let interior = domain.interior();
    if interior.is_empty() {
        return Err(GridError::NoInterior);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strata: Vec<usize> = (0..count).collect();
    strata.shuffle(&mut rng);

    let half = 0.5 * domain.spacing();
    let width = t_final / count as f64;
    let points = strata
        .into_iter()
        .map(|stratum| {
            let occ = interior[rng.random_range(0..interior.len())];
            let c = domain.center(occ);
            let x = [
                c[0] + rng.random_range(-half..=half),
                c[1] + rng.random_range(-half..=half),
                c[2] + rng.random_range(-half..=half),
            ];
            // keep the sample strictly inside its stratum despite rounding
            let t = ((stratum as f64 + rng.random::<f64>()) * width)
                .min(((stratum + 1) as f64 * width).next_down())
                .max(stratum as f64 * width);
            SamplePoint { x, t }
        })
        .collect();
    Ok(points)
}

/// Concentration snapshots at a handful of times, one value per occupied voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSeries {
    timepoints: Vec<f64>,
    values: Vec<Vec<f64>>,
    normalization: f64,
}

impl SnapshotSeries {
    pub fn new(timepoints: Vec<f64>, values: Vec<Vec<f64>>, normalization: f64) -> Result<Self> {
        if timepoints.is_empty() {
            return Err(GridError::InvalidSeries("no timepoints".into()));
        }
        if timepoints.len() != values.len() {
            return Err(GridError::InvalidSeries(format!(
                "{} timepoints but {} value arrays",
                timepoints.len(),
                values.len()
            )));
        }
        if timepoints[0] != 0.0 {
            return Err(GridError::InvalidSeries("first timepoint must be 0".into()));
        }
        if timepoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GridError::InvalidSeries(
                "timepoints must be strictly increasing".into(),
            ));
        }
        let n = values[0].len();
        if values.iter().any(|v| v.len() != n) {
            return Err(GridError::InvalidSeries("ragged value arrays".into()));
        }
        if !(normalization.is_finite() && normalization > 0.0) {
            return Err(GridError::InvalidSeries(format!(
                "normalization factor {normalization}"
            )));
        }
        Ok(Self {
            timepoints,
            values,
            normalization,
        })
    }

    pub fn timepoints(&self) -> &[f64] {
        &self.timepoints
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn snapshot(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn final_time(&self) -> f64 {
        *self.timepoints.last().expect("non-empty")
    }

    pub fn n_voxels(&self) -> usize {
        self.values[0].len()
    }

    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Same timepoints with new values, keeping the normalization factor.
    pub fn with_values(&self, values: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(self.timepoints.clone(), values, self.normalization)
    }
}

/// Divides every value by the global maximum; the factor is accumulated
/// into the series so the original scale can be restored.
pub fn normalize_series(series: &SnapshotSeries) -> Result<SnapshotSeries> {
    for (ti, snap) in series.values.iter().enumerate() {
        if let Some((voxel, &value)) = snap.iter().enumerate().find(|(_, &v)| !(v >= 0.0)) {
            return Err(GridError::NegativeValue {
                timepoint: ti,
                voxel,
                value,
            });
        }
    }
    let max = series.max_value();
    if !(max > 0.0 && max.is_finite()) {
        return Err(GridError::DegenerateData(max));
    }
    let values = series
        .values
        .iter()
        .map(|snap| snap.iter().map(|v| v / max).collect())
        .collect();
    SnapshotSeries::new(
        series.timepoints.clone(),
        values,
        series.normalization * max,
    )
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format_version: u32,
    dims: [usize; 3],
    spacing_mm: f64,
    timepoints_h: Vec<f64>,
    normalization_factor: f64,
}

/// Writes a dataset: one JSON header line, the occupancy bytes, then one
/// little-endian `f64` array per timepoint over the occupied voxels.
pub fn save_dataset(path: &Path, mask: &VoxelMask, series: &SnapshotSeries) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, mask, series)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset(w: &mut impl Write, mask: &VoxelMask, series: &SnapshotSeries) -> Result<()> {
    let n_occ = mask.occupied_count();
    if series.n_voxels() != n_occ {
        return Err(GridError::InvalidSeries(format!(
            "series has {} voxels, mask has {n_occ} occupied",
            series.n_voxels()
        )));
    }
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        dims: mask.dims,
        spacing_mm: mask.spacing,
        timepoints_h: series.timepoints.clone(),
        normalization_factor: series.normalization,
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    let bytes: Vec<u8> = mask.occupancy.iter().map(|&o| u8::from(o)).collect();
    w.write_all(&bytes)?;
    for snap in &series.values {
        for v in snap {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(VoxelMask, SnapshotSeries)> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

pub fn read_dataset(r: &mut impl BufRead) -> Result<(VoxelMask, SnapshotSeries)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: DatasetHeader = serde_json::from_str(line.trim_end_matches('\n'))?;
    if header.format_version != FORMAT_VERSION {
        return Err(GridError::UnknownVersion(header.format_version));
    }
    if header.dims.contains(&0) {
        return Err(GridError::InvalidDims(header.dims));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let n_vox: usize = header.dims.iter().product();
    if payload.len() < n_vox {
        return Err(GridError::PayloadSizeMismatch {
            expected: n_vox,
            found: payload.len(),
        });
    }
    let occupancy: Vec<bool> = payload[..n_vox].iter().map(|&b| b != 0).collect();
    let n_occ = occupancy.iter().filter(|&&o| o).count();
    let n_t = header.timepoints_h.len();
    let expected = n_vox + 8 * n_occ * n_t;
    if payload.len() != expected {
        return Err(GridError::PayloadSizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let values = payload[n_vox..]
        .chunks_exact(8 * n_occ.max(1))
        .take(n_t)
        .map(|chunk| {
            chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect()
        })
        .collect();
    let mask = VoxelMask::new(header.dims, header.spacing_mm, occupancy)?;
    let series = SnapshotSeries::new(header.timepoints_h, values, header.normalization_factor)?;
    Ok((mask, series))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_counts(mask: &VoxelMask) -> (usize, usize) {
        let [nx, ny, nz] = mask.dims();
        let (mut interior, mut boundary) = (0, 0);
        for k in 0..nz as isize {
            for j in 0..ny as isize {
                for i in 0..nx as isize {
                    if !mask.occupied(i, j, k) {
                        continue;
                    }
                    let mut all = true;
                    for (di, dj, dk, axis) in [
                        (1, 0, 0, 0),
                        (-1, 0, 0, 0),
                        (0, 1, 0, 1),
                        (0, -1, 0, 1),
                        (0, 0, 1, 2),
                        (0, 0, -1, 2),
                    ] {
                        if mask.dims()[axis] > 1 && !mask.occupied(i + di, j + dj, k + dk) {
                            all = false;
                        }
                    }
                    if all {
                        interior += 1;
                    } else {
                        boundary += 1;
                    }
                }
            }
        }
        (interior, boundary)
    }

    #[test]
    fn cube_3_has_one_interior_voxel() {
        let d = classify_voxels(&VoxelMask::full([3, 3, 3], 1.0).unwrap()).unwrap();
        assert_eq!(d.interior().len(), 1);
        assert_eq!(d.boundary().len(), 26);
        assert_eq!(d.center(d.interior()[0]), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn single_voxel_is_boundary() {
        let mask = VoxelMask::from_fn([3, 3, 3], 1.0, |i, j, k| (i, j, k) == (1, 1, 1)).unwrap();
        let d = classify_voxels(&mask).unwrap();
        assert_eq!((d.interior().len(), d.boundary().len()), (0, 1));
    }

    #[test]
    fn cube_5_matches_exhaustive_scan() {
        let mask = VoxelMask::full([5, 5, 5], 1.0).unwrap();
        let d = classify_voxels(&mask).unwrap();
        assert_eq!(brute_counts(&mask), (27, 98));
        assert_eq!((d.interior().len(), d.boundary().len()), (27, 98));
    }

    #[test]
    fn empty_mask_is_rejected() {
        let mask = VoxelMask::from_fn([2, 2, 2], 1.0, |_, _, _| false).unwrap();
        let err = classify_voxels(&mask).unwrap_err();
        assert_eq!(err.to_string(), "empty domain");
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(
            VoxelMask::new([0, 2, 2], 1.0, vec![]),
            Err(GridError::InvalidDims(_))
        ));
    }

    #[test]
    fn rod_classification() {
        let d = classify_voxels(&VoxelMask::full([1, 1, 6], 1.0).unwrap()).unwrap();
        assert_eq!(d.interior().len(), 4);
        assert_eq!(d.boundary().len(), 2);
        assert_eq!(d.active_axis_count(), 1);
    }

    #[test]
    fn ball_radius_12_size() {
        let mask = VoxelMask::ball(12, 1.0).unwrap();
        assert_eq!(mask.dims(), [24, 24, 24]);
        let n = mask.occupied_count();
        assert!((6500..8000).contains(&n), "{n}");
    }

    #[test]
    fn lhs_has_one_time_per_stratum() {
        let d = classify_voxels(&VoxelMask::full([5, 5, 5], 1.0).unwrap()).unwrap();
        let pts = sample_pde_points(&d, 4, 46.0, 7).unwrap();
        let mut hits = [0; 4];
        for p in &pts {
            hits[(p.t / 11.5) as usize] += 1;
        }
        assert_eq!(hits, [1, 1, 1, 1]);
    }

    #[test]
    fn jitter_stays_in_voxel() {
        let mask =
            VoxelMask::from_fn([21, 21, 21], 1.0, |i, j, k| {
                (9..=11).contains(&i) && (9..=11).contains(&j) && (9..=11).contains(&k)
            })
            .unwrap();
        let d = classify_voxels(&mask).unwrap();
        assert_eq!(d.center(d.interior()[0]), [10.0, 10.0, 10.0]);
        for p in sample_pde_points(&d, 500, 46.0, 3).unwrap() {
            for a in 0..3 {
                assert!((9.5..=10.5).contains(&p.x[a]), "{:?}", p.x);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = classify_voxels(&VoxelMask::ball(5, 1.0).unwrap()).unwrap();
        let a = sample_pde_points(&d, 100, 46.0, 11).unwrap();
        let b = sample_pde_points(&d, 100, 46.0, 11).unwrap();
        let c = sample_pde_points(&d, 100, 46.0, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sampling_requires_interior() {
        let d = classify_voxels(&VoxelMask::full([2, 2, 2], 1.0).unwrap()).unwrap();
        assert!(matches!(
            sample_pde_points(&d, 3, 46.0, 0),
            Err(GridError::NoInterior)
        ));
    }

    fn series(vals: Vec<f64>) -> SnapshotSeries {
        SnapshotSeries::new(vec![0.0], vec![vals], 1.0).unwrap()
    }

    #[test]
    fn normalize_divides_by_max() {
        let s = normalize_series(&series(vec![0.0, 0.5, 2.0])).unwrap();
        assert_eq!(s.snapshot(0), &[0.0, 0.25, 1.0]);
        assert_eq!(s.normalization(), 2.0);
    }

    #[test]
    fn normalize_is_identity_on_unit_max() {
        let s0 = series(vec![0.0, 0.3, 1.0]);
        let s = normalize_series(&s0).unwrap();
        assert_eq!(s, s0);
    }

    #[test]
    fn normalize_rejects_bad_data() {
        assert!(matches!(
            normalize_series(&series(vec![0.0, 0.0])),
            Err(GridError::DegenerateData(_))
        ));
        let err = normalize_series(&series(vec![0.0, 0.0])).unwrap_err();
        assert!(err.to_string().starts_with("degenerate data"));
        assert!(matches!(
            normalize_series(&series(vec![0.1, -0.2])),
            Err(GridError::NegativeValue { .. })
        ));
    }

    #[test]
    fn series_validation() {
        assert!(SnapshotSeries::new(vec![1.0], vec![vec![0.0]], 1.0).is_err());
        assert!(SnapshotSeries::new(vec![0.0, 0.0], vec![vec![0.0], vec![0.0]], 1.0).is_err());
        assert!(SnapshotSeries::new(vec![0.0, 1.0], vec![vec![0.0]], 1.0).is_err());
    }

    fn small_dataset() -> (VoxelMask, SnapshotSeries) {
        let mask = VoxelMask::ball(3, 0.8).unwrap();
        let n = mask.occupied_count();
        let values = (0..3)
            .map(|t| (0..n).map(|i| (i * 7 + t) as f64 / 3.0 + 1e-300).collect())
            .collect();
        let series = SnapshotSeries::new(vec![0.0, 7.0, 24.0 / 7.0 * 3.1], values, 0.1).unwrap();
        (mask, series)
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let (mask, series) = small_dataset();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &mask, &series).unwrap();
        let (m2, s2) = read_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(mask, m2);
        assert_eq!(series, s2);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let (mask, series) = small_dataset();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &mask, &series).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_dataset(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().starts_with("payload size mismatch"), "{err}");
    }

    #[test]
    fn header_errors() {
        let bad_dims = br#"{"format_version":1,"dims":[0,2,2],"spacing_mm":1.0,"timepoints_h":[0.0],"normalization_factor":1.0}
"#;
        let err = read_dataset(&mut bad_dims.as_slice()).unwrap_err();
        assert!(err.to_string().starts_with("invalid dims"), "{err}");

        let bad_version = br#"{"format_version":9,"dims":[1,1,1],"spacing_mm":1.0,"timepoints_h":[0.0],"normalization_factor":1.0}
"#;
        assert!(matches!(
            read_dataset(&mut bad_version.as_slice()),
            Err(GridError::UnknownVersion(9))
        ));
    }
}
