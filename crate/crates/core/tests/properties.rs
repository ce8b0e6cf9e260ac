use std::sync::Arc;

use proptest::prelude::*;

use fuzzy_boltzmann::collision::{collision_transform, CollisionOperator, Coupling};
use fuzzy_boltzmann::diagnostics::{
    comparison_defect, dissipation, entropy, matched_maxwellian, moment_s, povzner_terms, Psi, COMPARISON_CONSTANTS,
};
use fuzzy_boltzmann::dynamics::{advect, initial_condition, InitialCondition, KernelConfig, ProfileKind};
use fuzzy_boltzmann::kernels::CollisionKernelSpec;
use fuzzy_boltzmann::phase_space::{l1_distance, weighted_norm, AngularQuadrature};
use fuzzy_boltzmann::{build_spatial_kernel, convolve_x, moments, DistributionFunction, PhaseGrid};

fn small_grid() -> Arc<PhaseGrid> {
    Arc::new(PhaseGrid::new(1, 1.0, 4, 4.0, 8, 8).unwrap())
}

fn field(grid: &Arc<PhaseGrid>) -> impl Strategy<Value = DistributionFunction> {
    let grid = grid.clone();
    prop::collection::vec(0.0..1.0f64, grid.len())
        .prop_map(move |v| DistributionFunction::new(grid.clone(), v).unwrap())
}

fn hard_kernel(mu: f64) -> CollisionKernelSpec {
    KernelConfig { mu, profile: ProfileKind::Cosine, ..KernelConfig::default() }.build().unwrap()
}

fn unit(angle: f64) -> [f64; 2] {
    [angle.cos(), angle.sin()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn moments_are_linear(f in field(&small_grid()), g in field(&small_grid()), a in 0.0..3.0f64, b in 0.0..3.0f64) {
        let combo: Vec<f64> = f.values().iter().zip(g.values()).map(|(x, y)| a * x + b * y).collect();
        let h = DistributionFunction::new(f.grid_arc().clone(), combo).unwrap();
        let (mf, mg, mh) = (moments(&f), moments(&g), moments(&h));
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * (1.0 + x.abs());
        prop_assert!(close(mh.mass, a * mf.mass + b * mg.mass));
        prop_assert!(close(mh.energy, a * mf.energy + b * mg.energy));
        for k in 0..2 {
            prop_assert!((mh.momentum[k] - (a * mf.momentum[k] + b * mg.momentum[k])).abs() <= 1e-12 * (1.0 + mh.energy));
        }
    }

    #[test]
    fn l1_distance_is_a_metric(f in field(&small_grid()), g in field(&small_grid()), h in field(&small_grid())) {
        let d = |a: &DistributionFunction, b: &DistributionFunction| l1_distance(a, b).unwrap();
        prop_assert_eq!(d(&f, &g), d(&g, &f));
        prop_assert!(d(&f, &h) <= d(&f, &g) + d(&g, &h) + 1e-14);
        prop_assert_eq!(d(&f, &f), 0.0);
        prop_assert!(d(&f, &g) > 0.0);
    }

    #[test]
    fn zero_weight_norm_is_twice_mass(f in field(&small_grid())) {
        prop_assert_eq!(weighted_norm(&f, 0.0, 0.0), 2.0 * moments(&f).mass);
    }

    #[test]
    fn even_data_has_zero_momentum(half in prop::collection::vec(0.0..1.0f64, 4 * 64)) {
        let grid = small_grid();
        let nv = grid.nv();
        // Mirror each slice through v -> -v.
        let mut values = half.clone();
        for slice in values.chunks_exact_mut(nv * nv) {
            for i in 0..nv {
                for j in 0..nv {
                    let (a, b) = (i * nv + j, (nv - 1 - i) * nv + (nv - 1 - j));
                    if a < b {
                        slice[b] = slice[a];
                    }
                }
            }
        }
        let m = moments(&DistributionFunction::new(grid, values).unwrap());
        prop_assert_eq!(m.momentum, [0.0, 0.0]);
    }

    #[test]
    fn kernel_depends_only_on_speed_and_incidence(
        vx in -5.0..5.0f64, vy in -5.0..5.0f64, angle in 0.0..std::f64::consts::TAU, mu in 0.0..1.0f64,
    ) {
        let spec = hard_kernel(mu);
        let w = unit(angle);
        let b = spec.eval_b_checked([vx, vy], w).unwrap();
        prop_assert_eq!(b, spec.eval_b_checked([vx, vy], [-w[0], -w[1]]).unwrap());
        let c = vx * w[0] + vy * w[1];
        let reflected = [vx - 2.0 * c * w[0], vy - 2.0 * c * w[1]];
        let br = spec.eval_b_checked(reflected, w).unwrap();
        prop_assert!((b - br).abs() <= 1e-9 * (1.0 + b));
    }

    #[test]
    fn collision_transform_is_an_involution(
        v in prop::array::uniform2(-6.0..6.0f64), w in prop::array::uniform2(-6.0..6.0f64),
        angle in 0.0..std::f64::consts::TAU,
    ) {
        let om = unit(angle);
        let (a, b) = collision_transform(v, w, om).unwrap();
        let (c, d) = collision_transform(a, b, om).unwrap();
        for k in 0..2 {
            prop_assert!((c[k] - v[k]).abs() <= 1e-12 * (1.0 + v[k].abs()));
            prop_assert!((d[k] - w[k]).abs() <= 1e-12 * (1.0 + w[k].abs()));
        }
    }

    #[test]
    fn convolution_is_linear_positive_and_concentrating(
        f in field(&small_grid()), g in field(&small_grid()), a in 0.0..2.0f64, sigma in 0.05..0.9f64,
    ) {
        let grid = small_grid();
        let k = build_spatial_kernel(sigma, &grid, 3).unwrap();
        let combo: Vec<f64> = f.values().iter().zip(g.values()).map(|(x, y)| a * x + y).collect();
        let lhs = convolve_x(&DistributionFunction::new(grid.clone(), combo).unwrap(), &k).unwrap();
        let (cf, cg) = (convolve_x(&f, &k).unwrap(), convolve_x(&g, &k).unwrap());
        for ((l, x), y) in lhs.values().iter().zip(cf.values()).zip(cg.values()) {
            prop_assert!(*l >= 0.0);
            prop_assert!((l - (a * x + y)).abs() <= 1e-13 * (1.0 + l.abs()));
        }
        let narrow = build_spatial_kernel(0.5 * sigma, &grid, 3).unwrap();
        prop_assert!(narrow.weights()[0] > k.weights()[0]);
    }

    #[test]
    fn mollification_does_not_raise_the_superlinear_entropy(f in field(&small_grid()), scale in 0.1..20.0f64, sigma in 0.05..1.0f64) {
        let grid = small_grid();
        let scaled: Vec<f64> = f.values().iter().map(|x| x * scale).collect();
        let f = DistributionFunction::new(grid.clone(), scaled).unwrap();
        let ff = convolve_x(&f, &build_spatial_kernel(sigma, &grid, 3).unwrap()).unwrap();
        let phi = |d: &DistributionFunction| d.values().iter().map(|&z| if z > 1.0 { z * z.ln() } else { 0.0 }).sum::<f64>();
        prop_assert!(phi(&ff) <= phi(&f) + 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn loss_rate_obeys_kernel_growth(i in 0usize..64, j in 0usize..64, mu in 0.0..1.0f64) {
        let grid = small_grid();
        let spec = hard_kernel(mu);
        let (a, b) = (grid.velocity(i), grid.velocity(j));
        let rel = [a[0] - b[0], a[1] - b[1]];
        let bracket = (1.0 + rel[0] * rel[0] + rel[1] * rel[1]).sqrt();
        let quad = AngularQuadrature::new(grid.nomega());
        prop_assert!(spec.eval_a(rel, &quad) <= std::f64::consts::TAU * spec.sup_b() * bracket.powf(mu) * (1.0 + 1e-12));
    }

    #[test]
    fn gain_and_loss_are_nonnegative(f in field(&small_grid()), g in field(&small_grid()), mu in 0.0..1.0f64) {
        let op = CollisionOperator::new(small_grid(), hard_kernel(mu));
        let (gain, loss) = op.raw_fields(&f, &g).unwrap();
        prop_assert!(gain.iter().chain(&loss).all(|x| *x >= 0.0));
    }

    #[test]
    fn projected_collisions_conserve_per_slice(f in field(&small_grid()), sigma in 0.05..1.0f64, mu in 0.0..1.0f64) {
        let grid = small_grid();
        let op = CollisionOperator::new(grid.clone(), hard_kernel(mu));
        let coupling = Coupling::Fuzzy(build_spatial_kernel(sigma, &grid, 3).unwrap());
        let q = op.collide(&f, &coupling).unwrap();
        let net = q.net();
        let nvel = grid.n_vel();
        for (fs, qs) in f.values().chunks_exact(nvel).zip(net.chunks_exact(nvel)) {
            let mut sums = [0.0f64; 4];
            let mut scale = [0.0f64; 4];
            for (j, (&fv, &qv)) in fs.iter().zip(qs).enumerate() {
                let v = grid.velocity(j);
                let psi = [1.0, v[0], v[1], v[0] * v[0] + v[1] * v[1]];
                for k in 0..4 {
                    sums[k] += qv * psi[k];
                    scale[k] += (qv * psi[k]).abs() + fv * psi[k].abs();
                }
            }
            for k in 0..4 {
                prop_assert!(sums[k].abs() <= 1e-13 * scale[k].max(1.0), "invariant {} sum {}", k, sums[k]);
            }
        }
    }

    #[test]
    fn dissipation_is_nonnegative(f in field(&small_grid()), sigma in 0.05..1.0f64) {
        let grid = small_grid();
        let op = CollisionOperator::new(grid.clone(), hard_kernel(0.5));
        prop_assert!(dissipation(&op, &f, &Coupling::Local).unwrap() >= 0.0);
        let coupling = Coupling::Fuzzy(build_spatial_kernel(sigma, &grid, 3).unwrap());
        prop_assert!(dissipation(&op, &f, &coupling).unwrap() >= 0.0);
    }

    #[test]
    fn comparison_inequality_holds(f in field(&small_grid()), sigma in 0.05..1.0f64) {
        let grid = small_grid();
        let op = CollisionOperator::new(grid.clone(), hard_kernel(0.5));
        let coupling = Coupling::Fuzzy(build_spatial_kernel(sigma, &grid, 3).unwrap());
        let ff = coupling.mollify(&f).unwrap();
        let (gain, loss) = op.raw_fields(&f, &ff).unwrap();
        let h = op.dissipation_field(&f, &coupling).unwrap();
        let c = comparison_defect(&gain, &loss, &h, &COMPARISON_CONSTANTS).unwrap();
        prop_assert!(c.relative() <= 1e-8);
    }

    #[test]
    fn moments_of_order_s_are_monotone(f in field(&small_grid()), bump in field(&small_grid()), s in 0.0..4.0f64) {
        let larger: Vec<f64> = f.values().iter().zip(bump.values()).map(|(x, y)| x + y).collect();
        let g = DistributionFunction::new(f.grid_arc().clone(), larger).unwrap();
        prop_assert!(moment_s(&f, s).unwrap() <= moment_s(&g, s).unwrap());
    }

    #[test]
    fn linear_povzner_sum_vanishes(v in prop::array::uniform2(-6.0..6.0f64), w in prop::array::uniform2(-6.0..6.0f64)) {
        let spec = KernelConfig::default().build().unwrap();
        prop_assert!(povzner_terms(v, w, Psi::Linear, &spec).k.abs() <= 1e-12);
    }
}

#[test]
fn matched_maxwellian_minimises_entropy_on_the_library() {
    let grid = Arc::new(PhaseGrid::new(1, 1.0, 8, 6.0, 24, 8).unwrap());
    let library = [
        InitialCondition::Maxwellian { rho: 1.0, u: [0.5, 0.0], temp: 1.2 },
        InitialCondition::TwoBumpV { rho: 1.0, offset: 1.5, temp: 0.5 },
        InitialCondition::XModulatedMaxwellian { rho: 1.0, u: [0.0, 0.3], temp: 1.0, amplitude: 0.3 },
        InitialCondition::IndicatorBox { half_width: 2.0, mass: 1.0 },
    ];
    for ic in &library {
        let f = initial_condition(ic, &grid).unwrap();
        let m = matched_maxwellian(&f).unwrap();
        assert!(entropy(&m) <= entropy(&f) + 1e-6, "{}: {} > {}", ic.id(), entropy(&m), entropy(&f));
    }
}

#[test]
fn transport_is_reversible_on_integer_shifts() {
    // dx = 1/8 and every velocity node is an odd multiple of 0.5, so dt = 0.25 moves whole cells.
    let grid = Arc::new(PhaseGrid::new(1, 1.0, 8, 4.0, 8, 8).unwrap());
    let f = initial_condition(
        &InitialCondition::XModulatedMaxwellian { rho: 1.0, u: [0.0, 0.0], temp: 1.0, amplitude: 0.4 },
        &grid,
    )
    .unwrap();
    let mut g = f.clone();
    for _ in 0..5 {
        g = advect(&g, 0.25);
    }
    for _ in 0..5 {
        g = advect(&g, -0.25);
    }
    assert!(f.values().iter().zip(g.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
}
