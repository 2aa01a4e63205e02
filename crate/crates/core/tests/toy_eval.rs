use avae_core::eval::{
    branch_coverage, manifold_distance, manifold_sweep, recon_eval_seeded, DensityOracle, EvalSettings, Reconstructor,
    XiPolicy,
};
use avae_core::model::{Activation, MlpModel, MlpSpec, Role};
use avae_core::toy::{generate_toy_batch, toy_point, ToySample};
use avae_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn first_coordinate_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 1_000_000;
    let xs: Vec<f64> = generate_toy_batch(n, &mut rng).iter().map(|s| s.x[0]).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se_mean = (9.01f64 / n as f64).sqrt();
    assert!(mean.abs() < 3.0 * se_mean, "{mean}");
    // Var of a sample variance for a Gaussian is 2σ⁴/(n−1).
    let se_var = (2.0 * 9.01f64.powi(2) / (n - 1) as f64).sqrt();
    assert!((var - 9.01).abs() < 3.0 * se_var, "{var}");
}

#[test]
fn density_estimates_agree_across_seeds() {
    let a = DensityOracle::new(50_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = DensityOracle::new(50_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    for p in [[0.0, 1.0], [0.0, 1.9], [1.5, 0.2], [-3.0, -1.5], [4.0, 0.0]] {
        let (ea, eb) = (a.estimate(p), b.estimate(p));
        let combined = (ea.std_error.powi(2) + eb.std_error.powi(2)).sqrt();
        assert!(
            (ea.density - eb.density).abs() < 3.0 * combined,
            "{p:?}: {ea:?} vs {eb:?}"
        );
    }
}

#[test]
fn density_integrates_to_one() {
    // Midpoint rule over a box holding all but a negligible tail of the mass.
    let oracle = DensityOracle::with_draws(2_000, &mut ChaCha8Rng::seed_from_u64(3));
    let (x_lo, x_hi, y_lo, y_hi) = (-15.0, 15.0, -3.0, 3.5);
    let (nx, ny) = (300, 130);
    let (hx, hy) = ((x_hi - x_lo) / nx as f64, (y_hi - y_lo) / ny as f64);
    let mut total = 0.0;
    for i in 0..nx {
        for j in 0..ny {
            let p = [x_lo + (i as f64 + 0.5) * hx, y_lo + (j as f64 + 0.5) * hy];
            total += oracle.estimate(p).density * hx * hy;
        }
    }
    assert!((total - 1.0).abs() < 0.05, "{total}");
}

#[test]
fn densest_grid_points_lie_near_the_surface() {
    let oracle = DensityOracle::new(10_000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut best = (f64::NEG_INFINITY, [0.0, 0.0]);
    for i in 0..=60 {
        for j in 0..=40 {
            let p = [-6.0 + 0.2 * i as f64, -2.0 + 0.1 * j as f64];
            let ld = oracle.log_density(p);
            if ld > best.0 {
                best = (ld, p);
            }
        }
    }
    assert!(manifold_distance(best.1) < 0.2, "{best:?}");
    let on = oracle.log_density([0.0, 1.0]);
    let off = oracle.log_density([0.0, 3.0]);
    assert!(on > off);
}

#[test]
fn distance_is_a_pure_function() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts: Vec<[f64; 2]> = (0..50)
        .map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-3.0..3.0)])
        .collect();
    let forward: Vec<f64> = pts.iter().map(|&p| manifold_distance(p)).collect();
    let backward: Vec<f64> = pts.iter().rev().map(|&p| manifold_distance(p)).collect();
    assert!(forward.iter().eq(backward.iter().rev()));
    assert!(forward.iter().all(|&d| d >= 0.0));
}

/// A single affine layer with the given weight and zero bias.
fn linear(role: Role, weight: Vec<f64>, input: usize, output: usize) -> MlpModel {
    let spec = MlpSpec {
        input,
        hidden: vec![],
        output,
        hidden_activation: Activation::Tanh,
        init_std: 1.0,
    };
    let mut m = MlpModel::new(role, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    m.layers[0].weight = Tensor::matrix(input, output, weight).unwrap();
    m
}

#[test]
fn identity_pair_reconstructs_exactly() {
    let enc = linear(Role::Encoder, vec![1.0, 0.0, 0.0, 1.0], 2, 2);
    let dec = linear(Role::Decoder, vec![1.0, 0.0, 0.0, 1.0], 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let test: Vec<ToySample> = (0..300)
        .map(|_| {
            let (z1, z2) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            ToySample::from_factors(z1, z2, 0.0)
        })
        .collect();
    let settings = EvalSettings {
        density_draws: 10_000,
        coverage_samples: 10_000,
    };
    let report = recon_eval_seeded(&enc, Reconstructor::Decoder(&dec), &test, &settings, 1).unwrap();
    assert_eq!(report.sample_count, 300);
    assert_eq!(report.recon_mse, 0.0);
    assert!(report.mean_manifold_distance < 1e-6);
    let again = recon_eval_seeded(&enc, Reconstructor::Decoder(&dec), &test, &settings, 1).unwrap();
    assert_eq!(report, again);
}

#[test]
fn zero_weight_model_sweeps_a_constant() {
    let gen = linear(Role::Generator, vec![0.0; 4], 2, 2);
    let rows = manifold_sweep(
        Reconstructor::Generator(&gen),
        1,
        XiPolicy::Sampled { draws: 4 },
        &mut ChaCha8Rng::seed_from_u64(7),
    )
    .unwrap();
    assert_eq!(rows.len(), 601 * 4);
    assert!(rows.iter().all(|r| r.x == rows[0].x));
}

#[test]
fn coverage_grows_with_generated_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data: Vec<[f64; 2]> = generate_toy_batch(20_000, &mut rng).iter().map(|s| s.x).collect();
    let gen_base: Vec<[f64; 2]> = generate_toy_batch(20_000, &mut rng).iter().map(|s| s.x).collect();
    let mut prev = 0.0;
    for k in [0.0, 0.1, 0.3, 0.5, 0.8, 1.0, 1.5] {
        let scaled: Vec<[f64; 2]> = gen_base.iter().map(|p| [p[0], k * p[1]]).collect();
        let c = branch_coverage(&scaled, &data).unwrap();
        assert!(c >= prev, "k={k}: {c} < {prev}");
        assert!((0.0..=1.0).contains(&c));
        prev = c;
    }
    assert!(prev > 0.95);
}

#[test]
fn conditional_mean_curve_has_poor_coverage() {
    // The best deterministic map of x1 alone: x2 = cos(x1) + E[tanh(3 z2)] = cos(x1).
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<[f64; 2]> = generate_toy_batch(20_000, &mut rng).iter().map(|s| s.x).collect();
    let curve: Vec<[f64; 2]> = generate_toy_batch(20_000, &mut rng)
        .iter()
        .map(|s| toy_point(s.z1, 0.0, 0.0))
        .collect();
    let c = branch_coverage(&curve, &data).unwrap();
    assert!(c < 0.5, "{c}");
}
