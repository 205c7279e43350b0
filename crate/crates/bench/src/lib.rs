//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use nalgebra::Vector3;
use polaron::config::CrystalConfig;
use polaron::crystal::CrystalGroundState;
use polaron::response::{ResponseContext, ResponseOptions};
use polaron::{gaussian_density, Field};

pub fn reference_crystal() -> Arc<CrystalGroundState> {
    Arc::new(CrystalConfig::default().solve().expect("reference crystal converges"))
}

pub fn context(crystal: Arc<CrystalGroundState>, n: [usize; 3]) -> ResponseContext {
    let o = ResponseOptions { n_empty: 4, cg_tol: 1e-10, cg_max_iter: 200, band_tail_tol: 1.0 };
    ResponseContext::new(crystal, n, o).expect("supercell builds")
}

/// Gaussian defect at the supercell centre.
pub fn centred_defect(ctx: &ResponseContext, sigma: f64, charge: f64) -> Field {
    let d = &ctx.sc.domain;
    gaussian_density(d, d.lattice.basis * Vector3::new(0.5, 0.5, 0.5), sigma, charge)
}
