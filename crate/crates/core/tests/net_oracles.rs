use diffident::grid::{BoundingBox, SamplePoint};
use diffident::net::{
    eval_derivs, eval_values, forward_with_derivs, grad_params, init_glorot, param_count,
    InputNormalization, LossWeights, MlpParams, NetworkConfig, Observation,
};
use diffident::pinn::{data_loss, pde_loss, DiffusionParam};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn norm() -> InputNormalization {
    InputNormalization::new(
        BoundingBox {
            lower: [-0.5, -0.5, -0.5],
            upper: [8.5, 6.5, 10.5],
        },
        46.0,
    )
}

fn net(layers: usize, width: usize, seed: u64) -> MlpParams {
    init_glorot(NetworkConfig { hidden_layers: layers, width }, norm(), seed).unwrap()
}

fn value_at(params: &MlpParams, x: [f64; 3], t: f64) -> f64 {
    eval_values(params, &[SamplePoint { x, t }])[0]
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-3)
}

/// Fourth-order first and second central differences of the scalar network
/// along one input coordinate.
fn fd_derivatives(params: &MlpParams, p: SamplePoint, coord: usize, h: f64) -> (f64, f64) {
    let at = |s: f64| {
        let mut x = p.x;
        let mut t = p.t;
        if coord < 3 {
            x[coord] += s;
        } else {
            t += s;
        }
        value_at(params, x, t)
    };
    let (m2, m1, z, p1, p2) = (at(-2.0 * h), at(-h), at(0.0), at(h), at(2.0 * h));
    let first = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
    let second = (-m2 + 16.0 * m1 - 30.0 * z + 16.0 * p1 - p2) / (12.0 * h * h);
    (first, second)
}

#[test]
fn derivative_bundle_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (layers, width) in [(2, 8), (9, 64)] {
        let params = net(layers, width, 17);
        for _ in 0..6 {
            let p = SamplePoint {
                x: [rng.random_range(0.0..8.0), rng.random_range(0.0..6.0), rng.random_range(0.0..10.0)],
                t: rng.random_range(0.0..46.0),
            };
            let b = forward_with_derivs(&params, &p);
            assert!((b.value - value_at(&params, p.x, p.t)).abs() < 1e-14);
            let (dt, _) = fd_derivatives(&params, p, 3, 0.05);
            let lap: f64 = (0..3).map(|c| fd_derivatives(&params, p, c, 0.02).1).sum();
            assert!(rel(b.dt, dt) < 1e-5, "dt {} vs {}", b.dt, dt);
            assert!(rel(b.laplacian, lap) < 1e-5, "lap {} vs {}", b.laplacian, lap);
        }
    }
}

#[test]
fn default_network_size() {
    assert_eq!(param_count(4, 9, 64, 1), 33665);
    assert_eq!(NetworkConfig::default().param_count(), 33665);
}

fn batch(seed: u64, n_data: usize, n_pde: usize) -> (Vec<Observation>, Vec<SamplePoint>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |rng: &mut ChaCha8Rng| SamplePoint {
        x: [rng.random_range(0.0..8.0), rng.random_range(0.0..6.0), rng.random_range(0.0..10.0)],
        t: rng.random_range(0.0..46.0),
    };
    let data = (0..n_data)
        .map(|_| Observation {
            point: point(&mut rng),
            value: rng.random_range(0.0..1.0),
        })
        .collect();
    let pde = (0..n_pde).map(|_| point(&mut rng)).collect();
    (data, pde)
}

fn total_loss(
    params: &MlpParams,
    dp: &DiffusionParam,
    data: &[Observation],
    pde: &[SamplePoint],
    w: f64,
    p: u32,
) -> f64 {
    data_loss(params, data).unwrap() + w * pde_loss(params, dp, pde, p).unwrap()
}

fn gradient_errors(layers: usize, width: usize, p: u32, dp: DiffusionParam) -> Vec<f64> {
    let params = net(layers, width, 3);
    let (data, pde) = batch(9, 300, 300);
    let w = 4.0;
    let g = grad_params(
        &params,
        &dp,
        &data,
        &pde,
        LossWeights {
            pde_weight: w,
            exponent: f64::from(p),
        },
    )
    .unwrap();
    let reference = total_loss(&params, &dp, &data, &pde, w, p);
    assert!((g.terms.total - reference).abs() <= 1e-12 * reference.abs());

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut errors = Vec::new();
    for _ in 0..5 {
        let v: Vec<f64> = (0..params.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vd: f64 = rng.random_range(-1.0..1.0);
        let analytic = g.params.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + g.delta * vd;
        let f = |s: f64| {
            let mut q = params.clone();
            q.as_mut_slice().iter_mut().zip(&v).for_each(|(a, b)| *a += s * b);
            let mut d = dp;
            d.delta += s * vd;
            total_loss(&q, &d, &data, &pde, w, p)
        };
        let h = 1e-4;
        let numeric = (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h);
        errors.push((analytic - numeric).abs() / numeric.abs());
    }
    errors
}

#[test]
fn parameter_gradient_matches_finite_differences_squared_residual() {
    for e in gradient_errors(3, 16, 2, DiffusionParam::bounded(0.3)) {
        assert!(e < 1e-5, "relative error {e}");
    }
}

#[test]
fn parameter_gradient_matches_finite_differences_full_size() {
    for e in gradient_errors(9, 64, 2, DiffusionParam::identity(0.5)) {
        assert!(e < 1e-5, "relative error {e}");
    }
}

#[test]
fn parameter_gradient_matches_finite_differences_absolute_residual() {
    // |r| is smooth wherever no residual crosses zero within the stencil
    for e in gradient_errors(3, 16, 1, DiffusionParam::bounded(-0.4)) {
        assert!(e < 1e-5, "relative error {e}");
    }
}

#[test]
fn zero_pde_weight_gives_zero_delta_gradient() {
    let params = net(2, 8, 1);
    let (data, pde) = batch(2, 20, 20);
    let g = grad_params(
        &params,
        &DiffusionParam::default(),
        &data,
        &pde,
        LossWeights {
            pde_weight: 0.0,
            exponent: 2.0,
        },
    )
    .unwrap();
    assert_eq!(g.delta, 0.0);
    assert_eq!(g.terms.pde, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chunked_evaluation_is_pointwise(seed in 0u64..1000, n in 1usize..700) {
        let params = net(2, 8, seed);
        let (_, pts) = batch(seed, 0, n);
        let all = eval_derivs(&params, &pts);
        for i in [0, n / 2, n - 1] {
            let single = forward_with_derivs(&params, &pts[i]);
            prop_assert_eq!(all[i], single);
        }
    }

    #[test]
    fn residual_of_constant_network_vanishes(c in -3.0f64..3.0, t in 0.0f64..46.0) {
        let mut params = net(2, 8, 0);
        params.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        let last = params.n_layers() - 1;
        params.bias_mut(last)[0] = c;
        let b = forward_with_derivs(&params, &SamplePoint { x: [1.0, 2.0, 3.0], t });
        prop_assert_eq!(b.value, c);
        prop_assert_eq!(b.residual(0.7), 0.0);
    }
}
