//! Boundary-control fit of the diffusion coefficient: a Tikhonov-regularized
//! tracking functional over `(D, g)`, discrete-adjoint gradients through the
//! Crank–Nicolson model, and L-BFGS with a strong-Wolfe line search.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Domain, SnapshotSeries};
use crate::synth::{
    grid_index, BoundaryTable, CrankNicolson, Stencil, SynthError, DEFAULT_CG_TOLERANCE,
};

#[derive(Debug, Error)]
pub enum AdjointError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("control has {found:?} entries, expected {expected:?}")]
    ControlShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub type Result<T> = std::result::Result<T, AdjointError>;

/// Boundary values `g[b][n]`, time-major.
pub type BoundaryControl = BoundaryTable;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceGradient {
    /// Differences across adjacent boundary-voxel pairs.
    #[default]
    Graph,
    /// Graph differences plus one `(g - 0)` difference per face shared with
    /// the exterior, i.e. `g` extended by zero outside the domain.
    ZeroExtended,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default)]
    pub surface: SurfaceGradient,
}

impl RegWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            alpha,
            beta,
            gamma,
            surface: SurfaceGradient::Graph,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AdjointError::InvalidProblem(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ObjectiveValue {
    pub misfit: f64,
    pub regularization: f64,
}

impl ObjectiveValue {
    pub fn total(&self) -> f64 {
        self.misfit + self.regularization
    }
}

/// Data, discretization and geometry shared by every evaluation of a fit.
pub struct AdjointProblem<'d> {
    domain: &'d Domain,
    stencil: Stencil,
    dt: f64,
    n_steps: usize,
    /// `(time node, interior data)` for every snapshot.
    targets: Vec<(usize, Vec<f64>)>,
    initial: Vec<f64>,
    edges: Vec<(usize, usize)>,
    exterior_faces: Vec<f64>,
    tolerance: f64,
}

fn exterior_face_counts(domain: &Domain) -> Vec<f64> {
    let active: Vec<bool> = (0..3).map(|a| domain.mask().dims()[a] > 1).collect();
    domain
        .boundary()
        .iter()
        .map(|&occ| {
            domain
                .neighbors(occ)
                .iter()
                .enumerate()
                .filter(|&(slot, &nb)| active[slot / 2] && nb == crate::grid::NONE)
                .count() as f64
        })
        .collect()
}

impl<'d> AdjointProblem<'d> {
    /// Forward model with `n_steps` uniform steps of `dt`; every snapshot time
    /// must fall on a step boundary and the first must be `t = 0`.
    pub fn new(domain: &'d Domain, series: &SnapshotSeries, dt: f64, n_steps: usize) -> Result<Self> {
        if series.n_voxels() != domain.n_occupied() {
            return Err(AdjointError::InvalidProblem(format!(
                "series has {} voxels, domain {}",
                series.n_voxels(),
                domain.n_occupied()
            )));
        }
        if !(dt > 0.0) || n_steps == 0 {
            return Err(AdjointError::InvalidProblem(format!(
                "time grid dt={dt} steps={n_steps}"
            )));
        }
        let interior_of = |v: &[f64]| -> Vec<f64> { domain.interior().iter().map(|&o| v[o]).collect() };
        let mut targets = Vec::with_capacity(series.timepoints().len());
        for (i, &t) in series.timepoints().iter().enumerate() {
            let n = grid_index(t, dt)
                .filter(|&n| n <= n_steps)
                .ok_or(SynthError::Misaligned { time: t, dt })?;
            targets.push((n, interior_of(series.snapshot(i))));
        }
        let initial = interior_of(series.snapshot(0));
        Ok(Self {
            domain,
            stencil: Stencil::new(domain),
            dt,
            n_steps,
            targets,
            initial,
            edges: domain.boundary_edges(),
            exterior_faces: exterior_face_counts(domain),
            tolerance: DEFAULT_CG_TOLERANCE,
        })
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn domain(&self) -> &Domain {
        self.domain
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_boundary(&self) -> usize {
        self.stencil.n_boundary()
    }

    fn check_control(&self, g: &BoundaryControl) -> Result<()> {
        let expected = (self.n_boundary(), self.n_steps + 1);
        let found = (g.n_boundary(), g.n_nodes());
        if expected != found {
            return Err(AdjointError::ControlShape { expected, found });
        }
        Ok(())
    }

    fn check_diffusion(&self, d: f64) -> Result<()> {
        if !(d.is_finite() && d > 0.0) {
            return Err(AdjointError::InvalidProblem(format!(
                "diffusion coefficient {d}"
            )));
        }
        Ok(())
    }

    fn time_weight(&self, n: usize) -> f64 {
        if n == 0 || n == self.n_steps {
            0.5 * self.dt
        } else {
            self.dt
        }
    }

    fn cell_volume(&self) -> f64 {
        self.domain.spacing().powi(3)
    }

    fn face_area(&self) -> f64 {
        self.domain.spacing().powi(2)
    }

    /// Interior states at every time node.
    pub fn forward(&self, diffusion: f64, g: &BoundaryControl) -> Result<Vec<Vec<f64>>> {
        self.check_control(g)?;
        self.check_diffusion(diffusion)?;
        let cn = CrankNicolson::new(&self.stencil, self.dt, diffusion).with_tolerance(self.tolerance);
        let mut states = Vec::with_capacity(self.n_steps + 1);
        states.push(self.initial.clone());
        let mut next = vec![0.0; self.initial.len()];
        for n in 0..self.n_steps {
            cn.step(&states[n], g.node(n), g.node(n + 1), &mut next)?;
            states.push(next.clone());
        }
        Ok(states)
    }

    fn misfit(&self, states: &[Vec<f64>]) -> f64 {
        let dv = self.cell_volume();
        self.targets
            .iter()
            .map(|(n, d)| {
                dv * states[*n]
                    .iter()
                    .zip(d)
                    .map(|(u, d)| (u - d).powi(2))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Regularization value, and its gradient added into `grad` when given.
    pub fn regularization(
        &self,
        g: &BoundaryControl,
        reg: &RegWeights,
        mut grad: Option<&mut BoundaryControl>,
    ) -> f64 {
        let ds = self.face_area();
        let inv_h2 = 1.0 / (self.domain.spacing().powi(2));
        let mut value = 0.0;
        for n in 0..=self.n_steps {
            let w = 0.5 * ds * self.time_weight(n);
            let gn = g.node(n);
            let mut node_value = 0.0;
            if reg.alpha != 0.0 {
                node_value += reg.alpha * gn.iter().map(|v| v * v).sum::<f64>();
                if let Some(gr) = grad.as_deref_mut() {
                    for (o, v) in gr.node_mut(n).iter_mut().zip(gn) {
                        *o += 2.0 * w * reg.alpha * v;
                    }
                }
            }
            if reg.gamma != 0.0 {
                let mut energy = 0.0;
                for &(a, b) in &self.edges {
                    energy += (gn[a] - gn[b]).powi(2);
                }
                if reg.surface == SurfaceGradient::ZeroExtended {
                    for (v, k) in gn.iter().zip(&self.exterior_faces) {
                        energy += k * v * v;
                    }
                }
                node_value += reg.gamma * inv_h2 * energy;
                if let Some(gr) = grad.as_deref_mut() {
                    let c = 2.0 * w * reg.gamma * inv_h2;
                    let out = gr.node_mut(n);
                    for &(a, b) in &self.edges {
                        let d = gn[a] - gn[b];
                        out[a] += c * d;
                        out[b] -= c * d;
                    }
                    if reg.surface == SurfaceGradient::ZeroExtended {
                        for ((o, v), k) in out.iter_mut().zip(gn).zip(&self.exterior_faces) {
                            *o += c * k * v;
                        }
                    }
                }
            }
            value += w * node_value;
        }
        if reg.beta != 0.0 {
            let w = 0.5 * ds * self.dt * reg.beta;
            let inv_dt = 1.0 / self.dt;
            for n in 0..self.n_steps {
                let (g0, g1) = (g.node(n), g.node(n + 1));
                let mut s = 0.0;
                for (a, b) in g0.iter().zip(g1) {
                    s += ((b - a) * inv_dt).powi(2);
                }
                value += w * s;
                if let Some(gr) = grad.as_deref_mut() {
                    let c = 2.0 * w * inv_dt * inv_dt;
                    for b in 0..g0.len() {
                        let d = c * (g1[b] - g0[b]);
                        gr.node_mut(n + 1)[b] += d;
                        gr.node_mut(n)[b] -= d;
                    }
                }
            }
        }
        value
    }

    pub fn objective(&self, diffusion: f64, g: &BoundaryControl, reg: &RegWeights) -> Result<ObjectiveValue> {
        let states = self.forward(diffusion, g)?;
        Ok(ObjectiveValue {
            misfit: self.misfit(&states),
            regularization: self.regularization(g, reg, None),
        })
    }

    /// Objective and its exact discrete gradient `(dJ/dD, dJ/dg)`.
    pub fn gradient(
        &self,
        diffusion: f64,
        g: &BoundaryControl,
        reg: &RegWeights,
    ) -> Result<(ObjectiveValue, f64, BoundaryControl)> {
        let states = self.forward(diffusion, g)?;
        let misfit = self.misfit(&states);
        let mut grad_g = BoundaryTable::zeros(self.n_boundary(), self.n_steps + 1);
        let regularization = self.regularization(g, reg, Some(&mut grad_g));

        let ni = self.initial.len();
        let dv = self.cell_volume();
        let mut source = vec![vec![]; self.n_steps + 1];
        for (n, d) in &self.targets {
            if *n == 0 {
                continue;
            }
            let s: Vec<f64> = states[*n].iter().zip(d).map(|(u, d)| 2.0 * dv * (u - d)).collect();
            if source[*n].is_empty() {
                source[*n] = s;
            } else {
                source[*n].iter_mut().zip(&s).for_each(|(a, b)| *a += b);
            }
        }

        let cn = CrankNicolson::new(&self.stencil, self.dt, diffusion).with_tolerance(self.tolerance);
        let a = 0.5 * self.dt * diffusion;
        let half_dt = 0.5 * self.dt;
        // lambda[n] pairs with the step that produces node n; lambda[N + 1] = 0
        let mut lambda_next = vec![0.0; ni];
        let mut lambda = vec![0.0; ni];
        let mut rhs = vec![0.0; ni];
        let mut lu = vec![0.0; ni];
        let mut flux_next = vec![0.0; ni];
        let mut flux = vec![0.0; ni];
        self.stencil.apply(&states[self.n_steps], g.node(self.n_steps), &mut flux_next);
        let mut grad_d = 0.0;
        for n in (1..=self.n_steps).rev() {
            // rhs = M lambda^{n+1} + dJ/du^n
            if n == self.n_steps {
                rhs.iter_mut().for_each(|v| *v = 0.0);
            } else {
                self.stencil.apply_interior(&lambda_next, &mut lu);
                for i in 0..ni {
                    rhs[i] = lambda_next[i] + a * lu[i];
                }
            }
            if !source[n].is_empty() {
                rhs.iter_mut().zip(&source[n]).for_each(|(r, s)| *r += s);
            }
            lambda.copy_from_slice(&lambda_next);
            cn.solve(&rhs, &mut lambda)?;

            self.stencil.apply(&states[n - 1], g.node(n - 1), &mut flux);
            grad_d += half_dt
                * lambda
                    .iter()
                    .zip(flux.iter().zip(&flux_next))
                    .map(|(l, (f0, f1))| l * (f0 + f1))
                    .sum::<f64>();
            // step n-1 -> n couples g^{n-1} and g^n through a B
            self.stencil.add_boundary_transpose(&lambda, a, grad_g.node_mut(n));
            self.stencil.add_boundary_transpose(&lambda, a, grad_g.node_mut(n - 1));

            std::mem::swap(&mut lambda_next, &mut lambda);
            std::mem::swap(&mut flux_next, &mut flux);
        }
        Ok((
            ObjectiveValue {
                misfit,
                regularization,
            },
            grad_d,
            grad_g,
        ))
    }
}

/// Piecewise-linear interpolation in time of the boundary-voxel data onto the
/// `n_steps + 1` nodes of spacing `dt`, clamped outside the data range.
pub fn initial_guess(
    domain: &Domain,
    series: &SnapshotSeries,
    dt: f64,
    n_steps: usize,
) -> Result<BoundaryControl> {
    let times = series.timepoints();
    if times.len() < 2 {
        return Err(AdjointError::InvalidProblem(
            "initial guess needs at least two snapshots".into(),
        ));
    }
    let boundary = domain.boundary();
    let mut g = BoundaryTable::zeros(boundary.len(), n_steps + 1);
    for n in 0..=n_steps {
        let t = (n as f64 * dt).clamp(times[0], times[times.len() - 1]);
        let i = times.partition_point(|&ti| ti <= t).clamp(1, times.len() - 1) - 1;
        let s = ((t - times[i]) / (times[i + 1] - times[i])).clamp(0.0, 1.0);
        let (c0, c1) = (series.snapshot(i), series.snapshot(i + 1));
        for (slot, &occ) in g.node_mut(n).iter_mut().zip(boundary) {
            *slot = c0[occ] + s * (c1[occ] - c0[occ]);
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_evaluations: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 1000,
            gradient_tolerance: 1e-8,
            c1: 1e-4,
            c2: 0.9,
            max_evaluations: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: FitStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Probe {
    alpha: f64,
    f: f64,
    dphi: f64,
    grad: Vec<f64>,
}

/// Strong-Wolfe line search by bracketing and cubic-interpolation zoom.
fn line_search(
    eval: &mut dyn FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    x: &[f64],
    f0: f64,
    dphi0: f64,
    dir: &[f64],
    alpha0: f64,
    cfg: &LbfgsConfig,
    evaluations: &mut usize,
) -> Option<Probe> {
    let mut probe = |alpha: f64, evaluations: &mut usize| -> Option<Probe> {
        *evaluations += 1;
        let xt: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + alpha * d).collect();
        let (f, grad) = eval(&xt)?;
        if !f.is_finite() {
            return None;
        }
        let dphi = dot(&grad, dir);
        Some(Probe { alpha, f, dphi, grad })
    };
    let sufficient = |p: &Probe| p.f <= f0 + cfg.c1 * p.alpha * dphi0;
    let curvature = |p: &Probe| p.dphi.abs() <= -cfg.c2 * dphi0;

    let mut prev = Probe {
        alpha: 0.0,
        f: f0,
        dphi: dphi0,
        grad: Vec::new(),
    };
    let mut alpha = alpha0;
    let mut best: Option<Probe> = None;
    let mut remaining = cfg.max_evaluations;
    let (mut lo, mut hi);
    loop {
        if remaining == 0 {
            return best;
        }
        remaining -= 1;
        let Some(p) = probe(alpha, evaluations) else {
            // outside the admissible region: shrink towards the last good point
            alpha = 0.5 * (prev.alpha + alpha);
            continue;
        };
        if !sufficient(&p) || (prev.alpha > 0.0 && p.f >= prev.f) {
            lo = prev;
            hi = p;
            break;
        }
        if curvature(&p) {
            return Some(p);
        }
        if p.dphi >= 0.0 {
            lo = p;
            hi = prev;
            break;
        }
        alpha = 2.0 * p.alpha;
        if best.as_ref().is_none_or(|b| p.f < b.f) {
            best = Some(Probe { grad: p.grad.clone(), ..p });
        }
        prev = p;
    }
    // zoom: lo satisfies sufficient decrease and has the lower value
    while remaining > 0 {
        remaining -= 1;
        let (a, b) = (lo.alpha, hi.alpha);
        let trial = cubic_min(&lo, &hi)
            .filter(|t| {
                let (l, u) = (a.min(b), a.max(b));
                let margin = 0.1 * (u - l);
                *t > l + margin && *t < u - margin
            })
            .unwrap_or(0.5 * (a + b));
        if (b - a).abs() <= 1e-16 * a.abs().max(1.0) {
            break;
        }
        let Some(p) = probe(trial, evaluations) else {
            hi = Probe {
                alpha: trial,
                f: f64::INFINITY,
                dphi: f64::NAN,
                grad: Vec::new(),
            };
            continue;
        };
        if !sufficient(&p) || p.f >= lo.f {
            hi = p;
        } else {
            if curvature(&p) {
                return Some(p);
            }
            if p.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = p;
        }
    }
    if lo.alpha > 0.0 && lo.f < f0 {
        return Some(lo);
    }
    best
}

fn cubic_min(p: &Probe, q: &Probe) -> Option<f64> {
    if !(q.f.is_finite() && q.dphi.is_finite()) {
        return None;
    }
    let d1 = p.dphi + q.dphi - 3.0 * (p.f - q.f) / (p.alpha - q.alpha);
    let disc = d1 * d1 - p.dphi * q.dphi;
    if disc < 0.0 {
        return None;
    }
    let d2 = (q.alpha - p.alpha).signum() * disc.sqrt();
    let t = q.alpha - (q.alpha - p.alpha) * (q.dphi + d2 - d1) / (q.dphi - p.dphi + 2.0 * d2);
    t.is_finite().then_some(t)
}

/// Minimizes a smooth function given by `eval`, which returns `None` where
/// the function is undefined. `on_iter(iteration, x, f, grad)` runs after
/// every accepted step.
pub fn lbfgs_minimize(
    eval: &mut dyn FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    x0: Vec<f64>,
    cfg: &LbfgsConfig,
    on_iter: &mut dyn FnMut(usize, &[f64], f64, &[f64]),
) -> Option<Minimum> {
    let mut evaluations = 1;
    let (mut f, mut grad) = eval(&x0)?;
    let mut x = x0;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    on_iter(0, &x, f, &grad);
    let mut status = FitStatus::MaxIterations;
    let mut iterations = 0;
    for it in 1..=cfg.max_iterations {
        if norm(&grad) <= cfg.gradient_tolerance {
            status = FitStatus::Converged;
            break;
        }
        // two-loop recursion
        let mut q = grad.clone();
        let k = s_hist.len();
        let mut alphas = vec![0.0; k];
        for i in (0..k).rev() {
            alphas[i] = rho_hist[i] * dot(&s_hist[i], &q);
            q.iter_mut().zip(&y_hist[i]).for_each(|(a, y)| *a -= alphas[i] * y);
        }
        let gamma = if k > 0 {
            dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
        } else {
            1.0 / norm(&grad).max(1.0)
        };
        q.iter_mut().for_each(|a| *a *= gamma);
        for i in 0..k {
            let beta = rho_hist[i] * dot(&y_hist[i], &q);
            q.iter_mut().zip(&s_hist[i]).for_each(|(a, s)| *a += (alphas[i] - beta) * s);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut dphi0 = dot(&grad, &dir);
        if !(dphi0 < 0.0) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            dir = grad.iter().map(|v| -v / norm(&grad).max(1.0)).collect();
            dphi0 = dot(&grad, &dir);
        }
        let Some(p) = line_search(eval, &x, f, dphi0, &dir, 1.0, cfg, &mut evaluations) else {
            status = FitStatus::LineSearchFailed;
            break;
        };
        iterations = it;
        let s: Vec<f64> = dir.iter().map(|d| p.alpha * d).collect();
        let y: Vec<f64> = p.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        x.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        f = p.f;
        grad = p.grad;
        on_iter(it, &x, f, &grad);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if s_hist.len() == cfg.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
        }
    }
    if status == FitStatus::MaxIterations && norm(&grad) <= cfg.gradient_tolerance {
        status = FitStatus::Converged;
    }
    Some(Minimum {
        x,
        f,
        grad,
        iterations,
        evaluations,
        status,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub misfit: f64,
    pub regularization: f64,
    pub diffusion: f64,
    pub gradient_norm: f64,
}

impl IterationRecord {
    pub const CSV_HEADER: &'static str = "iteration,objective,misfit,reg,D,grad_norm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{},{:e}",
            self.iteration,
            self.objective,
            self.misfit,
            self.regularization,
            self.diffusion,
            self.gradient_norm
        )
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub diffusion: f64,
    pub control: BoundaryControl,
    pub status: FitStatus,
    pub trace: Vec<IterationRecord>,
}

/// Initial diffusion coefficient for fits, mm^2/h.
pub const INITIAL_DIFFUSION: f64 = 0.2;

/// Fits `(D, g)` by L-BFGS on the reduced objective. `D` is unconstrained;
/// points where `D <= 0` are treated as outside the domain of the objective.
pub fn lbfgs_fit(
    problem: &AdjointProblem,
    reg: &RegWeights,
    diffusion: f64,
    control: BoundaryControl,
    cfg: &LbfgsConfig,
) -> Result<FitResult> {
    reg.validate()?;
    problem.check_control(&control)?;
    problem.check_diffusion(diffusion)?;
    let nb = control.n_boundary();
    let mut x0 = Vec::with_capacity(1 + control.as_slice().len());
    x0.push(diffusion);
    x0.extend_from_slice(control.as_slice());

    let mut last_terms = std::collections::HashMap::<u64, ObjectiveValue>::new();
    let mut eval = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        let g = BoundaryTable::from_flat(nb, x[1..].to_vec());
        let (value, gd, gg) = problem.gradient(x[0], &g, reg).ok()?;
        last_terms.insert(x[0].to_bits() ^ value.total().to_bits(), value);
        let mut grad = Vec::with_capacity(x.len());
        grad.push(gd);
        grad.extend_from_slice(gg.as_slice());
        Some((value.total(), grad))
    };
    let mut trace = Vec::new();
    let mut records = Vec::new();
    let minimum = {
        let mut on_iter = |it: usize, x: &[f64], f: f64, grad: &[f64]| {
            records.push((it, x[0], f, norm(grad)));
        };
        lbfgs_minimize(&mut eval, x0, cfg, &mut on_iter)
    }
    .ok_or_else(|| AdjointError::InvalidProblem("objective undefined at the starting point".into()))?;
    for (it, d, f, gn) in records {
        let terms = last_terms
            .get(&(d.to_bits() ^ f.to_bits()))
            .copied()
            .unwrap_or(ObjectiveValue {
                misfit: f,
                regularization: 0.0,
            });
        trace.push(IterationRecord {
            iteration: it,
            objective: f,
            misfit: terms.misfit,
            regularization: terms.regularization,
            diffusion: d,
            gradient_norm: gn,
        });
    }
    Ok(FitResult {
        diffusion: minimum.x[0],
        control: BoundaryTable::from_flat(nb, minimum.x[1..].to_vec()),
        status: minimum.status,
        trace,
    })
}
