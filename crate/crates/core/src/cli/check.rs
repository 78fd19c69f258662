//! Self-checks behind `diffident check`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{initial_guess, AdjointProblem, RegWeights};
use crate::grid::{classify_voxels, BoundingBox, SamplePoint, VoxelMask};
use crate::net::{
    eval_values, forward_with_derivs, grad_params, init_glorot, InputNormalization, LossWeights,
    MlpParams, NetworkConfig, Observation,
};
use crate::pinn::{data_loss, pde_loss, DiffusionParam};
use crate::synth::{cn_solve, make_synthetic, BoundaryTable, ForwardProblem};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &'static str, error: f64, tolerance: f64) -> Self {
        Self {
            name,
            error,
            tolerance,
            passed: error < tolerance,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<22} error {:.3e} (tol {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.error,
            self.tolerance
        )
    }
}

fn fd4(f: &dyn Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

fn fd4_second(f: &dyn Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 16.0 * f(h) - 30.0 * f(0.0) + 16.0 * f(-h) - f(-2.0 * h)) / (12.0 * h * h)
}

fn small_net(seed: u64) -> MlpParams {
    let norm = InputNormalization::new(
        BoundingBox {
            lower: [-0.5; 3],
            upper: [8.5, 8.5, 8.5],
        },
        46.0,
    );
    init_glorot(NetworkConfig { hidden_layers: 3, width: 16 }, norm, seed).expect("valid config")
}

fn random_point(rng: &mut ChaCha8Rng) -> SamplePoint {
    SamplePoint {
        x: [rng.random_range(0.0..8.0), rng.random_range(0.0..8.0), rng.random_range(0.0..8.0)],
        t: rng.random_range(0.0..46.0),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-3)
}

fn network_derivatives(seed: u64) -> f64 {
    let params = small_net(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let p = random_point(&mut rng);
        let params = &params;
        let b = forward_with_derivs(params, &p);
        let along = |c: usize| {
            move |s: f64| {
                let mut q = p;
                if c < 3 {
                    q.x[c] += s;
                } else {
                    q.t += s;
                }
                eval_values(params, &[q])[0]
            }
        };
        let dt = fd4(&along(3), 0.05);
        let lap: f64 = (0..3).map(|c| fd4_second(&along(c), 0.02)).sum();
        worst = worst.max(rel(b.dt, dt)).max(rel(b.laplacian, lap));
    }
    worst
}

fn network_gradient(seed: u64, perturb: bool) -> f64 {
    let params = small_net(seed);
    let dp = DiffusionParam::bounded(-0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a7d);
    let data: Vec<Observation> = (0..200)
        .map(|_| Observation {
            point: random_point(&mut rng),
            value: rng.random_range(0.0..1.0),
        })
        .collect();
    let pde: Vec<SamplePoint> = (0..200).map(|_| random_point(&mut rng)).collect();
    let w = 2.0;
    let mut g = grad_params(
        &params,
        &dp,
        &data,
        &pde,
        LossWeights {
            pde_weight: w,
            exponent: 2.0,
        },
    )
    .expect("finite gradient");
    if perturb {
        g.params.iter_mut().step_by(7).for_each(|v| *v *= 1.01);
    }
    let total = |q: &MlpParams, d: &DiffusionParam| {
        data_loss(q, &data).expect("non-empty") + w * pde_loss(q, d, &pde, 2).expect("non-empty")
    };
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let v: Vec<f64> = (0..params.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vd: f64 = rng.random_range(-1.0..1.0);
        let analytic = g.params.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + g.delta * vd;
        let f = |s: f64| {
            let mut q = params.clone();
            q.as_mut_slice().iter_mut().zip(&v).for_each(|(a, b)| *a += s * b);
            let mut d = dp;
            d.delta += s * vd;
            total(&q, &d)
        };
        let numeric = fd4(&f, 1e-4);
        worst = worst.max((analytic - numeric).abs() / numeric.abs());
    }
    worst
}

fn adjoint_gradient(seed: u64) -> f64 {
    let domain = classify_voxels(&VoxelMask::ball(3, 1.0).expect("valid")).expect("non-empty");
    let series = make_synthetic(&domain, 0.36, &[0.0, 4.0, 8.0], 0.5).expect("solver converges");
    let problem = AdjointProblem::new(&domain, &series, 1.0, 8)
        .expect("consistent")
        .with_tolerance(1e-14);
    let mut g = initial_guess(&domain, &series, 1.0, 8).expect("consistent");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xad70);
    g.as_mut_slice().iter_mut().for_each(|v| *v += 0.05 * rng.random_range(-1.0..1.0));
    let reg = RegWeights::new(1e-3, 0.1, 0.05);
    let d0 = 0.25;
    let (_, gd, gg) = problem.gradient(d0, &g, &reg).expect("solver converges");
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let vd: f64 = rng.random_range(-1.0..1.0);
        let vg: Vec<f64> = (0..g.as_slice().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic = gd * vd + gg.as_slice().iter().zip(&vg).map(|(a, b)| a * b).sum::<f64>();
        let f = |s: f64| {
            let gs: Vec<f64> = g.as_slice().iter().zip(&vg).map(|(a, b)| a + s * b).collect();
            let gs = BoundaryTable::from_flat(g.n_boundary(), gs);
            problem.objective(d0 + s * vd, &gs, &reg).expect("solver converges").total()
        };
        let numeric = fd4(&f, 1e-3);
        worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1e-12));
    }
    worst
}

/// Decay of the fundamental mode on a rod with zero Dirichlet ends against
/// `exp(-D (pi/L)^2 t)`.
fn solver_mode_decay() -> f64 {
    let (n, h, d, dt, t_end) = (19usize, 0.5, 0.36, 0.25, 46.0);
    let domain = classify_voxels(&VoxelMask::full([1, 1, n + 2], h).expect("valid")).expect("non-empty");
    let l = (n + 1) as f64 * h;
    let initial: Vec<f64> = (0..domain.n_occupied())
        .map(|o| (std::f64::consts::PI * domain.center(o)[2] / l).sin())
        .collect();
    let steps = (t_end / dt) as usize;
    let hist = cn_solve(&ForwardProblem {
        domain: &domain,
        diffusion: d,
        boundary: BoundaryTable::zeros(2, steps + 1),
        initial: initial.clone(),
        dt,
        n_steps: steps,
        tolerance: 1e-13,
    })
    .expect("solver converges");
    let mid = (0..domain.n_occupied())
        .max_by(|&a, &b| initial[a].total_cmp(&initial[b]))
        .expect("non-empty");
    let ratio = hist.fields[steps][mid] / initial[mid];
    let exact = (-d * (std::f64::consts::PI / l).powi(2) * t_end).exp();
    (ratio - exact).abs() / exact
}

pub fn run_checks(seed: u64, perturb_gradient: bool) -> Vec<CheckResult> {
    vec![
        CheckResult::new("network derivatives", network_derivatives(seed), 1e-5),
        CheckResult::new("network gradient", network_gradient(seed, perturb_gradient), 1e-5),
        CheckResult::new("adjoint gradient", adjoint_gradient(seed), 1e-4),
        CheckResult::new("solver mode decay", solver_mode_decay(), 1e-2),
    ]
}
