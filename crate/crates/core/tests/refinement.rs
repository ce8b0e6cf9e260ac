use std::sync::Arc;

use fuzzy_boltzmann::collision::{CollisionOperator, Coupling};
use fuzzy_boltzmann::diagnostics::dissipation;
use fuzzy_boltzmann::phase_space::maxwellian_slice;
use fuzzy_boltzmann::{moments, CollisionKernelSpec, DistributionFunction, PhaseGrid};

fn maxwellian(nv: usize) -> DistributionFunction {
    let grid = Arc::new(PhaseGrid::new(1, 1.0, 2, 6.0, nv, 16).unwrap());
    let slice = maxwellian_slice(&grid, 1.0, [0.0, 0.0], 1.0);
    DistributionFunction::new(grid.clone(), slice.repeat(grid.n_space())).unwrap()
}

fn operator(f: &DistributionFunction, correction: bool) -> CollisionOperator {
    CollisionOperator::new(f.grid_arc().clone(), CollisionKernelSpec::maxwell()).with_equilibrium_correction(correction)
}

fn raw_mismatch(nv: usize) -> f64 {
    let f = maxwellian(nv);
    let (gain, loss) = operator(&f, false).raw_fields(&f, &f).unwrap();
    let l1: f64 = gain.iter().zip(&loss).map(|(g, l)| (g - l).abs()).sum::<f64>() * f.grid().cell();
    l1 / moments(&f).mass
}

fn maxwellian_dissipation(nv: usize) -> f64 {
    let f = maxwellian(nv);
    dissipation(&operator(&f, false), &f, &Coupling::Local).unwrap()
}

fn close(a: f64, b: f64, rtol: f64) -> bool {
    (a - b).abs() <= rtol * b.abs()
}

#[test]
fn raw_maxwellian_mismatch_is_second_order() {
    let (coarse, fine) = (raw_mismatch(16), raw_mismatch(32));
    assert!(close(coarse, 6.386905792088948e-2, 1e-9) && close(fine, 1.6946642914159985e-2, 1e-9));
    let ratio = coarse / fine;
    assert!((3.3..4.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn maxwellian_dissipation_is_fourth_order() {
    let (coarse, fine) = (maxwellian_dissipation(16), maxwellian_dissipation(32));
    assert!(close(coarse, 4.684723269087705e-3, 1e-9) && close(fine, 3.2211844414926417e-4, 1e-9));
    let ratio = coarse / fine;
    assert!((12.0..18.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn corrected_operator_annihilates_sampled_maxwellian() {
    let f = maxwellian(24);
    let q = operator(&f, true).collide(&f, &Coupling::Local).unwrap();
    let l1: f64 = q.net().iter().map(|x| x.abs()).sum::<f64>() * f.grid().cell();
    assert!(l1 <= 1e-10 * moments(&f).mass, "{l1}");
}
