//! Crank–Nicolson finite-difference diffusion on a voxel domain.
//!
//! Interior voxels are unknowns; boundary voxels carry Dirichlet values.
//! With `L` the 7-point Laplacian split into the interior block `L_II` and
//! the interior-to-boundary coupling `B`, one step reads
//!
//! ```text
//! (I - a L_II) u^{n+1} = (I + a L_II) u^n + a B (g^n + g^{n+1}),   a = dt D / 2
//! ```
//!
//! The left-hand matrix is symmetric positive definite and is solved with
//! Jacobi-preconditioned conjugate gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::grid::{Domain, GridError, SnapshotSeries, NONE};

/// Relative residual at which the linear solves stop.
pub const DEFAULT_CG_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("conjugate gradient did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },
    #[error("invalid forward problem: {0}")]
    InvalidProblem(String),
    #[error("time {time} h is outside [0, {t_final}] h")]
    TimeOutOfRange { time: f64, t_final: f64 },
    #[error("snapshot time {time} h is not on the solver grid (dt = {dt} h)")]
    Misaligned { time: f64, dt: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Triangular boundary enrichment profile: rises linearly to 1 at `T/2`,
/// then falls back to 0 at `T`.
pub fn boundary_profile(t: f64, t_final: f64) -> Result<f64> {
    if !(0.0..=t_final).contains(&t) {
        return Err(SynthError::TimeOutOfRange { time: t, t_final });
    }
    Ok(if t <= 0.5 * t_final {
        2.0 * t / t_final
    } else {
        2.0 - 2.0 * t / t_final
    })
}

/// 7-point Laplacian restricted to interior rows.
#[derive(Debug, Clone)]
pub struct Stencil {
    inv_h2: f64,
    diag: f64,
    interior_nb: Vec<[usize; 6]>,
    boundary_nb: Vec<[usize; 6]>,
    n_boundary: usize,
}

impl Stencil {
    pub fn new(domain: &Domain) -> Self {
        let h = domain.spacing();
        let inv_h2 = 1.0 / (h * h);
        let mut interior_nb = Vec::with_capacity(domain.interior().len());
        let mut boundary_nb = Vec::with_capacity(domain.interior().len());
        for &occ in domain.interior() {
            let mut ii = [NONE; 6];
            let mut bb = [NONE; 6];
            for (slot, &nb) in domain.neighbors(occ).iter().enumerate() {
                if nb == NONE {
                    continue;
                }
                match domain.role(nb) {
                    crate::grid::Role::Interior(p) => ii[slot] = p,
                    crate::grid::Role::Boundary(p) => bb[slot] = p,
                }
            }
            interior_nb.push(ii);
            boundary_nb.push(bb);
        }
        Self {
            inv_h2,
            diag: -2.0 * domain.active_axis_count() as f64 * inv_h2,
            interior_nb,
            boundary_nb,
            n_boundary: domain.boundary().len(),
        }
    }

    pub fn n_interior(&self) -> usize {
        self.interior_nb.len()
    }

    pub fn n_boundary(&self) -> usize {
        self.n_boundary
    }

    /// Diagonal entry of `L_II` (identical for every interior row).
    pub fn diagonal(&self) -> f64 {
        self.diag
    }

    /// `out = L_II u`.
    pub fn apply_interior(&self, u: &[f64], out: &mut [f64]) {
        for (i, nb) in self.interior_nb.iter().enumerate() {
            let mut s = self.diag * u[i];
            for &n in nb.iter().filter(|&&n| n != NONE) {
                s += self.inv_h2 * u[n];
            }
            out[i] = s;
        }
    }

    /// `out = L_II u + B g`: the full Laplacian evaluated at interior voxels.
    pub fn apply(&self, u: &[f64], g: &[f64], out: &mut [f64]) {
        self.apply_interior(u, out);
        self.add_boundary(g, 1.0, out);
    }

    /// `out += scale * B g`.
    pub fn add_boundary(&self, g: &[f64], scale: f64, out: &mut [f64]) {
        let w = scale * self.inv_h2;
        for (i, nb) in self.boundary_nb.iter().enumerate() {
            for &n in nb.iter().filter(|&&n| n != NONE) {
                out[i] += w * g[n];
            }
        }
    }

    /// `out += scale * B^T v`.
    pub fn add_boundary_transpose(&self, v: &[f64], scale: f64, out: &mut [f64]) {
        let w = scale * self.inv_h2;
        for (i, nb) in self.boundary_nb.iter().enumerate() {
            for &n in nb.iter().filter(|&&n| n != NONE) {
                out[n] += w * v[i];
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One Crank–Nicolson propagator for fixed `dt` and `D`.
#[derive(Debug, Clone)]
pub struct CrankNicolson<'s> {
    stencil: &'s Stencil,
    half_step: f64,
    tolerance: f64,
    max_iterations: usize,
}

impl<'s> CrankNicolson<'s> {
    pub fn new(stencil: &'s Stencil, dt: f64, diffusion: f64) -> Self {
        Self {
            stencil,
            half_step: 0.5 * dt * diffusion,
            tolerance: DEFAULT_CG_TOLERANCE,
            max_iterations: 10 * stencil.n_interior().max(100),
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    /// `out = (I - a L_II) x`.
    fn apply_implicit(&self, x: &[f64], out: &mut [f64]) {
        self.stencil.apply_interior(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi - self.half_step * *o;
        }
    }

    /// Solves `(I - a L_II) x = rhs` starting from the current contents of `x`.
    pub fn solve(&self, rhs: &[f64], x: &mut [f64]) -> Result<usize> {
        let n = rhs.len();
        let rhs_norm = dot(rhs, rhs).sqrt();
        if rhs_norm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return Ok(0);
        }
        let inv_diag = 1.0 / (1.0 - self.half_step * self.stencil.diagonal());
        let mut r = vec![0.0; n];
        self.apply_implicit(x, &mut r);
        for (ri, bi) in r.iter_mut().zip(rhs) {
            *ri = bi - *ri;
        }
        let mut z: Vec<f64> = r.iter().map(|v| v * inv_diag).collect();
        let mut p = z.clone();
        let mut ap = vec![0.0; n];
        let mut rz = dot(&r, &z);
        let target = self.tolerance * rhs_norm;
        let mut res = dot(&r, &r).sqrt();
        for it in 0..self.max_iterations {
            if res <= target {
                return Ok(it);
            }
            self.apply_implicit(&p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            res = dot(&r, &r).sqrt();
            for i in 0..n {
                z[i] = r[i] * inv_diag;
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        if res <= target {
            return Ok(self.max_iterations);
        }
        Err(SynthError::NonConvergence {
            residual: res / rhs_norm,
            iterations: self.max_iterations,
        })
    }

    /// Advances interior values `u` from boundary values `g0` to `g1`.
    pub fn step(&self, u: &[f64], g0: &[f64], g1: &[f64], out: &mut [f64]) -> Result<usize> {
        let mut rhs = vec![0.0; u.len()];
        self.stencil.apply(u, g0, &mut rhs);
        for (r, ui) in rhs.iter_mut().zip(u) {
            *r = ui + self.half_step * *r;
        }
        self.stencil.add_boundary(g1, self.half_step, &mut rhs);
        out.copy_from_slice(u);
        self.solve(&rhs, out)
    }
}

/// Dirichlet boundary values, one row of `|boundary|` values per time node.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTable {
    n_boundary: usize,
    values: Vec<f64>,
}

impl BoundaryTable {
    pub fn zeros(n_boundary: usize, n_nodes: usize) -> Self {
        Self {
            n_boundary,
            values: vec![0.0; n_boundary * n_nodes],
        }
    }

    pub fn from_fn(
        n_boundary: usize,
        n_nodes: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(n_boundary * n_nodes);
        for n in 0..n_nodes {
            for b in 0..n_boundary {
                values.push(f(b, n));
            }
        }
        Self { n_boundary, values }
    }

    pub fn from_flat(n_boundary: usize, values: Vec<f64>) -> Self {
        assert!(n_boundary == 0 || values.len().is_multiple_of(n_boundary));
        Self { n_boundary, values }
    }

    pub fn n_boundary(&self) -> usize {
        self.n_boundary
    }

    pub fn n_nodes(&self) -> usize {
        self.values.len().checked_div(self.n_boundary).unwrap_or(0)
    }

    pub fn node(&self, n: usize) -> &[f64] {
        &self.values[n * self.n_boundary..(n + 1) * self.n_boundary]
    }

    pub fn node_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.values[n * self.n_boundary..(n + 1) * self.n_boundary]
    }

    pub fn get(&self, b: usize, n: usize) -> f64 {
        self.values[n * self.n_boundary + b]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// A fully specified forward diffusion run.
#[derive(Debug, Clone)]
pub struct ForwardProblem<'d> {
    pub domain: &'d Domain,
    pub diffusion: f64,
    pub boundary: BoundaryTable,
    /// Initial field, one value per occupied voxel.
    pub initial: Vec<f64>,
    pub dt: f64,
    pub n_steps: usize,
    pub tolerance: f64,
}

impl ForwardProblem<'_> {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidProblem(m));
        if !(self.diffusion.is_finite() && self.diffusion > 0.0) {
            return bad(format!("diffusion coefficient {}", self.diffusion));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) || self.n_steps == 0 {
            return bad(format!("time grid dt={} steps={}", self.dt, self.n_steps));
        }
        if self.boundary.n_boundary() != self.domain.boundary().len()
            || self.boundary.n_nodes() != self.n_steps + 1
        {
            return bad(format!(
                "boundary table {}x{} but domain needs {}x{}",
                self.boundary.n_boundary(),
                self.boundary.n_nodes(),
                self.domain.boundary().len(),
                self.n_steps + 1
            ));
        }
        if self.initial.len() != self.domain.n_occupied() {
            return bad(format!(
                "initial field has {} values for {} voxels",
                self.initial.len(),
                self.domain.n_occupied()
            ));
        }
        Ok(())
    }
}

/// Field values on every occupied voxel at each of the `n_steps + 1` nodes.
#[derive(Debug, Clone)]
pub struct History {
    pub dt: f64,
    pub fields: Vec<Vec<f64>>,
}

impl History {
    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn min(&self) -> f64 {
        self.fields.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.fields
            .iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn scatter(domain: &Domain, interior: &[f64], boundary: &[f64]) -> Vec<f64> {
    let mut full = vec![0.0; domain.n_occupied()];
    for (&occ, &v) in domain.interior().iter().zip(interior) {
        full[occ] = v;
    }
    for (&occ, &v) in domain.boundary().iter().zip(boundary) {
        full[occ] = v;
    }
    full
}

/// Runs the Crank–Nicolson scheme and returns every time node. Boundary
/// voxels of `history[0]` take `g^0`; interior voxels take the initial field.
pub fn cn_solve(problem: &ForwardProblem) -> Result<History> {
    problem.validate()?;
    let domain = problem.domain;
    let stencil = Stencil::new(domain);
    let cn = CrankNicolson::new(&stencil, problem.dt, problem.diffusion)
        .with_tolerance(problem.tolerance);

    let mut u: Vec<f64> = domain.interior().iter().map(|&o| problem.initial[o]).collect();
    let mut next = vec![0.0; u.len()];
    let mut fields = Vec::with_capacity(problem.n_steps + 1);
    fields.push(scatter(domain, &u, problem.boundary.node(0)));
    for n in 0..problem.n_steps {
        cn.step(&u, problem.boundary.node(n), problem.boundary.node(n + 1), &mut next)?;
        std::mem::swap(&mut u, &mut next);
        fields.push(scatter(domain, &u, problem.boundary.node(n + 1)));
    }
    Ok(History {
        dt: problem.dt,
        fields,
    })
}

/// Index of `time` on a grid of spacing `dt`, if it lies on a node.
pub fn grid_index(time: f64, dt: f64) -> Option<usize> {
    let k = (time / dt).round();
    ((time - k * dt).abs() <= 1e-9 * dt.max(time.abs())).then_some(k as usize)
}

/// Synthetic measurement series with a spatially homogeneous boundary that
/// follows [`boundary_profile`] and a zero initial field.
pub fn make_synthetic(
    domain: &Domain,
    diffusion: f64,
    timepoints: &[f64],
    dt: f64,
) -> Result<SnapshotSeries> {
    let t_final = *timepoints
        .last()
        .ok_or_else(|| SynthError::InvalidProblem("no snapshot times".into()))?;
    make_synthetic_with(domain, diffusion, timepoints, dt, |_, t| {
        boundary_profile(t, t_final).unwrap_or(0.0)
    })
}

/// Like [`make_synthetic`] but with an arbitrary boundary function `g(x, t)`
/// evaluated at boundary voxel centers.
pub fn make_synthetic_with(
    domain: &Domain,
    diffusion: f64,
    timepoints: &[f64],
    dt: f64,
    g: impl Fn([f64; 3], f64) -> f64,
) -> Result<SnapshotSeries> {
    let t_final = *timepoints
        .last()
        .ok_or_else(|| SynthError::InvalidProblem("no snapshot times".into()))?;
    let indices = timepoints
        .iter()
        .map(|&t| grid_index(t, dt).ok_or(SynthError::Misaligned { time: t, dt }))
        .collect::<Result<Vec<_>>>()?;
    let n_steps = *indices.last().expect("non-empty");
    if n_steps == 0 {
        return Err(SynthError::InvalidProblem(format!(
            "final snapshot time {t_final} must be positive"
        )));
    }
    let centers: Vec<[f64; 3]> = domain.boundary().iter().map(|&o| domain.center(o)).collect();
    let boundary = BoundaryTable::from_fn(centers.len(), n_steps + 1, |b, n| {
        g(centers[b], (n as f64 * dt).min(t_final))
    });
    let problem = ForwardProblem {
        domain,
        diffusion,
        boundary,
        initial: vec![0.0; domain.n_occupied()],
        dt,
        n_steps,
        tolerance: DEFAULT_CG_TOLERANCE,
    };
    let history = cn_solve(&problem)?;
    let values = indices
        .iter()
        .map(|&n| history.fields[n].iter().map(|&v| v.max(0.0)).collect())
        .collect();
    Ok(SnapshotSeries::new(timepoints.to_vec(), values, 1.0)?)
}

/// Boundary value that follows [`boundary_profile`] in time with a smooth
/// spatial modulation between 0.5 and 1.5 of the profile.
pub fn varying_boundary(x: [f64; 3], t: f64, t_final: f64) -> f64 {
    let m = (x[0] / 3.0).sin() * (x[1] / 4.0).cos() * (x[2] / 5.0 + 0.3).sin();
    boundary_profile(t, t_final).unwrap_or(0.0) * (1.0 + 0.5 * m)
}

/// Adds clamped Gaussian noise: `c <- max(0, c + eta)`, `eta ~ N(0, sigma^2)`.
pub fn add_noise(series: &SnapshotSeries, sigma: f64, seed: u64) -> Result<SnapshotSeries> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(SynthError::InvalidProblem(format!("noise level {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(series.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = series
        .values()
        .iter()
        .map(|snap| {
            snap.iter()
                .map(|&c| clamp_noisy(c, normal.sample(&mut rng)))
                .collect()
        })
        .collect();
    Ok(series.with_values(values)?)
}

#[inline]
pub fn clamp_noisy(c: f64, eta: f64) -> f64 {
    (c + eta).max(0.0)
}
