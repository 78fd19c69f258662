//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `DIFFIDENT_ACCEPTANCE_SCALE=desk` switches from the reduced default problem
//! to the full-size one. `DIFFIDENT_ACCEPTANCE_STRICT=1` turns any FAIL into a
//! nonzero exit status. `DIFFIDENT_ACCEPTANCE_ONLY=2,6` runs a subset.

use std::time::Instant;

use diffident::adjoint::{
    initial_guess, lbfgs_fit, AdjointProblem, FitStatus, LbfgsConfig, RegWeights, SurfaceGradient,
    INITIAL_DIFFUSION,
};
use diffident::cli::check::run_checks;
use diffident::cli::{run_training, CliError, PreparedData, RunConfig};
use diffident::diagnostics::{
    data_time_ratio, rel_error, residual_final, residual_over_time, spearman, ResidualReport,
};
use diffident::grid::{
    classify_voxels, normalize_series, read_dataset, write_dataset, Domain, SnapshotSeries,
    VoxelMask,
};
use diffident::net::{param_count, NetworkConfig};
use diffident::pinn::{even_checkpoints, DiffusionMode, LossSpec, LrSchedule, Refinement};
use diffident::synth::{add_noise, make_synthetic, make_synthetic_with, varying_boundary};

const D0: f64 = 0.36;
const D_MIN: f64 = 0.1;
const TIMES: [f64; 4] = [0.0, 7.0, 24.0, 46.0];
const SIGMA: f64 = 0.05;

#[derive(Debug, Clone)]
struct Scale {
    name: &'static str,
    radius: usize,
    network: NetworkConfig,
    n_pde: usize,
    data_batch: usize,
    pde_batch: usize,
    epochs: usize,
    schedule: LrSchedule,
    /// Epochs for the noise, correlation, instability and refinement studies.
    study_epochs: usize,
    adjoint_radius: usize,
    /// `(n_r rows, n_d columns)` of the minibatch grid.
    batch_grid: ([usize; 3], [usize; 2]),
}

fn scale() -> Scale {
    match std::env::var("DIFFIDENT_ACCEPTANCE_SCALE").as_deref() {
        Ok("desk") => Scale {
            name: "desk",
            radius: 12,
            network: NetworkConfig::default(),
            n_pde: 1_000_000,
            data_batch: 10_000,
            pde_batch: 50_000,
            epochs: 2_000,
            schedule: LrSchedule::Exponential { start: 1e-3, end: 1e-4 },
            study_epochs: 2_000,
            adjoint_radius: 12,
            batch_grid: ([10_000, 100_000, 330_000], [10_000, 100_000]),
        },
        _ => Scale {
            name: "ci",
            radius: 4,
            network: NetworkConfig { hidden_layers: 4, width: 32 },
            n_pde: 4_000,
            data_batch: 70,
            pde_batch: 250,
            epochs: 1_000,
            schedule: LrSchedule::Exponential { start: 1e-2, end: 1e-4 },
            study_epochs: 500,
            adjoint_radius: 8,
            batch_grid: ([40, 400, 1_320], [400, 1_120]),
        },
    }
}

struct Data {
    domain: Domain,
    clean: SnapshotSeries,
    noisy: Vec<SnapshotSeries>,
}

impl Data {
    fn new(radius: usize, seeds: usize) -> Self {
        let domain = classify_voxels(&VoxelMask::ball(radius, 1.0).unwrap()).unwrap();
        let clean = make_synthetic(&domain, D0, &TIMES, 0.25).unwrap();
        let noisy = (0..seeds as u64).map(|s| add_noise(&clean, SIGMA, 100 + s).unwrap()).collect();
        Self { domain, clean, noisy }
    }

    fn prepared(&self, series: &SnapshotSeries) -> PreparedData {
        PreparedData {
            domain: self.domain.clone(),
            series: normalize_series(series).unwrap(),
        }
    }
}

fn base_config(s: &Scale, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig {
        network: s.network,
        ..Default::default()
    };
    cfg.train.n_pde = s.n_pde;
    cfg.train.data_batch = s.data_batch;
    cfg.train.pde_batch = s.pde_batch;
    cfg.train.epochs = epochs;
    cfg.train.schedule = s.schedule;
    cfg.reference_diffusion = Some(D0);
    cfg
}

struct Pinn {
    diffusion: f64,
    error: f64,
    residual: f64,
    report: ResidualReport,
    n_pde: usize,
}

fn pinn(data: &PreparedData, cfg: &RunConfig, seed: u64) -> Result<Pinn, String> {
    match run_training(data, cfg, seed) {
        Ok((outcome, report)) => {
            let d = outcome.diffusion.value();
            Ok(Pinn {
                diffusion: d,
                error: rel_error(d, D0).unwrap_or(f64::NAN),
                residual: report.final_norm,
                n_pde: outcome.pde_points.len(),
                report,
            })
        }
        Err(CliError::Numerical(msg)) => Err(msg),
        Err(e) => panic!("unexpected failure: {e}"),
    }
}

struct Line {
    id: u32,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn report(line: &Line, started: Instant) {
    println!(
        "{} {} {}: {} [{:.0} s]",
        if line.pass { "PASS" } else { "FAIL" },
        line.id,
        line.title,
        line.detail,
        started.elapsed().as_secs_f64()
    );
}

fn info(text: &str) {
    println!("     {text}");
}

fn criterion_1() -> Line {
    let start = Instant::now();
    let results = run_checks(0, false);
    let secs = start.elapsed().as_secs_f64();
    let detail: Vec<String> = results.iter().map(|r| format!("{} {:.1e}", r.name, r.error)).collect();
    Line {
        id: 1,
        title: "oracle gate",
        pass: results.iter().all(|r| r.passed) && secs < 120.0,
        detail: format!("{}; {secs:.1} s (< 120 s)", detail.join(", ")),
    }
}

fn criterion_2(s: &Scale, data: &Data) -> Line {
    let cfg = base_config(s, s.epochs);
    let run = pinn(&data.prepared(&data.clean), &cfg, 0).expect("clean training completes");
    Line {
        id: 2,
        title: "clean-data recovery",
        pass: run.error <= 5.0,
        detail: format!("D = {:.4}, rel. error {:.2}% (<= 5%) after {} epochs", run.diffusion, run.error, s.epochs),
    }
}

/// The ten `(p, w_r)` cells on the first noisy dataset, plus two more seeds
/// for the three dichotomy conditions.
fn criteria_3_and_4(s: &Scale, data: &Data) -> (Line, Line) {
    let mut cells = Vec::new();
    for p in [1u32, 2] {
        for w in [1.0, 4.0, 16.0, 64.0, 256.0] {
            let mut cfg = base_config(s, s.study_epochs);
            cfg.loss = LossSpec::new(w, p);
            let run = pinn(&data.prepared(&data.noisy[0]), &cfg, 0).expect("bounded training completes");
            info(&format!("p = {p}, w_r = {w:>3}: D = {:.4}, rel. error {:6.2}%, residual {:.3e}", run.diffusion, run.error, run.residual));
            cells.push((p, w, run));
        }
    }

    let conditions: [(&str, u32, f64); 3] = [("p=2 w_r=1", 2, 1.0), ("p=2 w_r=64", 2, 64.0), ("p=1 w_r=1", 1, 1.0)];
    let mut outcomes: Vec<Vec<f64>> = Vec::new();
    for &(_, p, w) in &conditions {
        let first = cells.iter().find(|c| c.0 == p && c.1 == w).unwrap().2.diffusion;
        let mut ds = vec![first];
        for seed in 1..3u64 {
            let mut cfg = base_config(s, s.study_epochs);
            cfg.loss = LossSpec::new(w, p);
            let run = pinn(&data.prepared(&data.noisy[seed as usize]), &cfg, seed).expect("bounded training completes");
            ds.push(run.diffusion);
        }
        outcomes.push(ds);
    }
    let collapsed = outcomes[0].iter().filter(|&&d| (d - D_MIN).abs() <= 0.05 * D_MIN).count();
    let recovered = |ds: &[f64]| ds.iter().filter(|&&d| rel_error(d, D0).unwrap() <= 15.0).count();
    let (r64, r1) = (recovered(&outcomes[1]), recovered(&outcomes[2]));
    let fmt = |ds: &[f64]| ds.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>().join("/");
    let line3 = Line {
        id: 3,
        title: "noise dichotomy",
        pass: collapsed >= 2 && r64 >= 2 && r1 >= 2,
        detail: format!(
            "{}: D = {} ({collapsed}/3 within 5% of {D_MIN}); {}: D = {} ({r64}/3 <= 15%); {}: D = {} ({r1}/3 <= 15%)",
            conditions[0].0,
            fmt(&outcomes[0]),
            conditions[1].0,
            fmt(&outcomes[1]),
            conditions[2].0,
            fmt(&outcomes[2]),
        ),
    };

    let residuals: Vec<f64> = cells.iter().map(|c| c.2.residual).collect();
    let errors: Vec<f64> = cells.iter().map(|c| c.2.error).collect();
    let rho = spearman(&residuals, &errors).unwrap();
    let line4 = Line {
        id: 4,
        title: "residual-accuracy correlation",
        pass: rho >= 0.5,
        detail: format!("Spearman rho = {rho:.3} over {} cells (>= 0.5)", cells.len()),
    };
    (line3, line4)
}

fn criterion_5(s: &Scale, data: &Data) -> Line {
    let run_mode = |mode: DiffusionMode| -> Vec<Option<f64>> {
        (0..4u64)
            .map(|seed| {
                let mut cfg = base_config(s, s.study_epochs);
                cfg.loss = LossSpec::new(1.0, 1);
                cfg.train.schedule = LrSchedule::Constant { rate: 1e-3 };
                cfg.diffusion.mode = mode;
                let series = &data.noisy[seed as usize % data.noisy.len()];
                pinn(&data.prepared(series), &cfg, seed).ok().map(|r| r.diffusion)
            })
            .collect()
    };
    let identity = run_mode(DiffusionMode::Identity);
    let bounded = run_mode(DiffusionMode::Bounded);
    let fmt = |v: &[Option<f64>]| {
        v.iter()
            .map(|d| d.map_or("x".to_string(), |d| format!("{d:.3}")))
            .collect::<Vec<_>>()
            .join("/")
    };
    let aborted = identity.iter().filter(|d| d.is_none()).count();
    let completed = bounded.iter().filter(|d| d.is_some()).count();
    Line {
        id: 5,
        title: "identity-mode instability",
        pass: aborted >= 1 && completed == 4,
        detail: format!(
            "identity D = {} ({aborted}/4 aborted, need >= 1); bounded D = {} ({completed}/4 completed)",
            fmt(&identity),
            fmt(&bounded)
        ),
    }
}

fn adjoint_run(domain: &Domain, series: &SnapshotSeries, reg: RegWeights) -> (f64, f64, FitStatus, usize) {
    let series = normalize_series(series).unwrap();
    let problem = AdjointProblem::new(domain, &series, 1.0, 46).unwrap();
    let g = initial_guess(domain, &series, 1.0, 46).unwrap();
    let cfg = LbfgsConfig::default();
    let fit = lbfgs_fit(&problem, &reg, INITIAL_DIFFUSION, g, &cfg).unwrap();
    let iterations = fit.trace.last().map_or(0, |r| r.iteration);
    (fit.diffusion, rel_error(fit.diffusion, D0).unwrap_or(f64::INFINITY), fit.status, iterations)
}

fn criterion_6(s: &Scale) -> Line {
    let data = Data::new(s.adjoint_radius, 1);
    let cases = [
        ("clean b=0.01 g=0", &data.clean, RegWeights::new(1e-6, 0.01, 0.0)),
        ("noisy b=0.1 g=0", &data.noisy[0], RegWeights::new(1e-6, 0.1, 0.0)),
        ("clean b=0.01 g=1", &data.clean, RegWeights::new(1e-6, 0.01, 1.0)),
    ];
    let runs: Vec<_> = cases
        .iter()
        .map(|(label, series, reg)| {
            let r = adjoint_run(&data.domain, series, *reg);
            info(&format!("{label}: D = {:.4}, rel. error {:.1}%, {:?} after {} iterations", r.0, r.1, r.2, r.3));
            r
        })
        .collect();
    let zero_extended = RegWeights {
        surface: SurfaceGradient::ZeroExtended,
        ..RegWeights::new(1e-6, 0.01, 1.0)
    };
    let z = adjoint_run(&data.domain, &data.clean, zero_extended);
    info(&format!(
        "clean b=0.01 g=1 with zero-extended surface gradient: D = {:.4e}, rel. error {:.3e}%, {:?}",
        z.0, z.1, z.2
    ));
    let within = runs.iter().all(|r| r.3 <= 1000);
    Line {
        id: 6,
        title: "adjoint baseline",
        pass: runs[0].1 <= 10.0 && runs[1].1 <= 15.0 && runs[2].1 > 100.0 && within,
        detail: format!(
            "clean {:.1}% (<= 10%), noisy {:.1}% (<= 15%), gamma = 1 {:.1}% (> 100%), iterations {}/{}/{} (<= 1000)",
            runs[0].1, runs[1].1, runs[2].1, runs[0].3, runs[1].3, runs[2].3
        ),
    }
}

fn criterion_7(s: &Scale) -> Line {
    let domain = classify_voxels(&VoxelMask::ball(s.radius, 1.0).unwrap()).unwrap();
    let series = make_synthetic_with(&domain, D0, &TIMES, 0.25, |x, t| varying_boundary(x, t, 46.0)).unwrap();
    let data = PreparedData {
        domain,
        series: normalize_series(&series).unwrap(),
    };
    let m = s.n_pde / 10;
    let checkpoints = even_checkpoints(s.study_epochs, 9);
    let variants = [
        ("none", Refinement::None),
        ("RAR", Refinement::Rar { checkpoints: checkpoints.clone(), add: m, candidates: None }),
        ("RAE", Refinement::Rae { checkpoints, add: m, candidates: None }),
    ];
    let exclusion = 1.0;
    let mut ratios = Vec::new();
    let mut sizes = Vec::new();
    for (name, refinement) in variants {
        let mut cfg = base_config(s, s.study_epochs);
        cfg.loss = LossSpec::new(1.0, 1);
        cfg.train.refinement = refinement;
        let run = pinn(&data, &cfg, 0).expect("training completes");
        let ratio = data_time_ratio(&run.report.curve, &TIMES, exclusion);
        info(&format!("{name}: D = {:.4}, ratio {ratio:.2}, |P| = {}", run.diffusion, run.n_pde));
        ratios.push(ratio);
        sizes.push(run.n_pde);
    }
    let best = ratios[1].min(ratios[2]);
    let sizes_ok = sizes[1] == s.n_pde + 9 * m && sizes[2] == s.n_pde;
    Line {
        id: 7,
        title: "adaptive refinement",
        pass: ratios[0] >= 3.0 && best * 2.0 <= ratios[0] && sizes_ok,
        detail: format!(
            "ratio without refinement {:.2} (>= 3), RAR {:.2}, RAE {:.2} (need <= {:.2}); |P| RAR {} (= {}), RAE {} (= {})",
            ratios[0],
            ratios[1],
            ratios[2],
            ratios[0] / 2.0,
            sizes[1],
            s.n_pde + 9 * m,
            sizes[2],
            s.n_pde
        ),
    }
}

fn criterion_8(s: &Scale, data: &Data) -> Line {
    let count = param_count(4, 9, 64, 1);

    let mut cfg = base_config(s, 5);
    cfg.network = NetworkConfig { hidden_layers: 2, width: 16 };
    cfg.train.n_pde = 500;
    let prepared = data.prepared(&data.noisy[0]);
    let a = run_training(&prepared, &cfg, 11).unwrap().0;
    let b = run_training(&prepared, &cfg, 11).unwrap().0;
    let deterministic = a.log == b.log && a.params.as_slice() == b.params.as_slice();

    let t_final = 46.0;
    let curve = residual_over_time(&a.params, &a.diffusion, &prepared.domain, t_final, 200);
    let mean = curve.iter().map(|(_, r)| r).sum::<f64>() / curve.len() as f64;
    let fin = residual_final(&a.params, &a.diffusion, &prepared.domain, t_final, 200);
    let residual_rel = (fin - mean).abs() / mean;

    let mut buf = Vec::new();
    write_dataset(&mut buf, data.domain.mask(), &data.noisy[0]).unwrap();
    let (mask, series) = read_dataset(&mut buf.as_slice()).unwrap();
    let bits = |s: &SnapshotSeries| s.values().iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    let round_trip = &mask == data.domain.mask()
        && bits(&series) == bits(&data.noisy[0])
        && series.timepoints() == data.noisy[0].timepoints();

    Line {
        id: 8,
        title: "structural identities",
        pass: count == 33665 && residual_rel <= 1e-12 && round_trip && deterministic,
        detail: format!(
            "param_count {count} (= 33665), residual mean identity {residual_rel:.1e} (<= 1e-12), \
             round trip {}, deterministic trace {}",
            if round_trip { "bit-exact" } else { "differs" },
            if deterministic { "yes" } else { "no" }
        ),
    }
}

fn criterion_9(s: &Scale, data: &Data) -> Line {
    let (rows, cols) = s.batch_grid;
    let prepared = data.prepared(&data.clean);
    let mut table = [[0.0f64; 2]; 3];
    for (i, &n_r) in rows.iter().enumerate() {
        for (j, &n_d) in cols.iter().enumerate() {
            let mut cfg = base_config(s, s.study_epochs);
            cfg.train.pde_batch = n_r;
            cfg.train.data_batch = n_d;
            table[i][j] = pinn(&prepared, &cfg, 0).expect("clean training completes").error;
        }
        info(&format!("n_r = {n_r:>7}: {:6.2}% {:6.2}%", table[i][0], table[i][1]));
    }
    let col_mean = |j: usize| table.iter().map(|r| r[j]).sum::<f64>() / 3.0;
    let (small, large) = (col_mean(0), col_mean(1));
    Line {
        id: 9,
        title: "minibatch study",
        pass: small < large,
        detail: format!("mean rel. error n_d = {}: {small:.2}%, n_d = {}: {large:.2}%", cols[0], cols[1]),
    }
}

fn main() {
    let s = scale();
    let only: Option<Vec<u32>> = std::env::var("DIFFIDENT_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    println!("acceptance at {} scale", s.name);
    let started = Instant::now();
    let data = Data::new(s.radius, 4);
    let mut lines = Vec::new();
    let mut emit = |line: Line| {
        report(&line, started);
        lines.push(line.pass);
    };
    if wanted(1) {
        emit(criterion_1());
    }
    if wanted(2) {
        emit(criterion_2(&s, &data));
    }
    if wanted(3) || wanted(4) {
        let (l3, l4) = criteria_3_and_4(&s, &data);
        if wanted(3) {
            emit(l3);
        }
        if wanted(4) {
            emit(l4);
        }
    }
    if wanted(5) {
        emit(criterion_5(&s, &data));
    }
    if wanted(6) {
        emit(criterion_6(&s));
    }
    if wanted(7) {
        emit(criterion_7(&s));
    }
    if wanted(8) {
        emit(criterion_8(&s, &data));
    }
    if wanted(9) {
        emit(criterion_9(&s, &data));
    }
    let failed = lines.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 && std::env::var("DIFFIDENT_ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
