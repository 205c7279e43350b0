//! The acceptance suite: one outcome per criterion, each a list of named checks against
//! pinned bounds. Shared by the acceptance test target and `polaron --verify`.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{e_per_convergence, energy_decouple, macro_domain, solve_u_per};
use crate::config::{Config, CrystalConfig};
use crate::crystal::CrystalGroundState;
use crate::defect::{decompose_resolvent, scf_defect};
use crate::error::{Error, Result};
use crate::fit::power_fit;
use crate::harness::{run_counterexample, run_macrolimit, run_polaron_limit, ConvergenceReport, Lab};
use crate::lattice::{coulomb_d_unchecked, gaussian_density, Domain, Field, FieldKind, Lattice};
use crate::linalg::CMat;
use crate::pekar::{initial_gaussian, solve_pekar_ground, FlowOptions, PekarKernel};
use crate::response::{
    extract_eps_m, matrix_kinetic_identity_residual, pekar_interaction, pekar_interaction_real_space, DielectricMatrix,
    ResponseContext,
};
use crate::C64;

/// Coupling-one Choquard ground-state energy, frozen from the radial finite-difference oracle.
pub const CHOQUARD_E0: f64 = -0.054256429172883744;

/// Scalar dielectric constant of the reference crystal at the primary extraction supercell.
pub const REFERENCE_EPS: f64 = 2.068846064341637;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    AtMost,
    AtLeast,
    Above,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub relation: Relation,
    pub bound: f64,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, relation: Relation, bound: f64) -> Self {
        let pass = match relation {
            Relation::AtMost => value <= bound,
            Relation::AtLeast => value >= bound,
            Relation::Above => value > bound,
        };
        Check { name: name.into(), value, relation, bound, pass }
    }

    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value, Relation::AtMost, bound)
    }

    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value, Relation::AtLeast, bound)
    }

    pub fn above(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value, Relation::Above, bound)
    }

    pub fn flag(name: impl Into<String>, ok: bool) -> Self {
        Self::at_least(name, if ok { 1.0 } else { 0.0 }, 1.0)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Outcome {
    pub id: u32,
    pub title: String,
    pub checks: Vec<Check>,
    pub error: Option<String>,
    pub runtime_seconds: f64,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.error.is_none() && !self.checks.is_empty() && self.checks.iter().all(|c| c.pass)
    }

    /// `PASS`/`FAIL` line with the failing checks spelled out.
    pub fn line(&self) -> String {
        let status = if self.pass() { "PASS" } else { "FAIL" };
        let mut s = format!("criterion {} {status}: {} ({:.1} s)", self.id, self.title, self.runtime_seconds);
        if let Some(e) = &self.error {
            s.push_str(&format!(" error: {e}"));
        }
        for c in self.checks.iter().filter(|c| !c.pass) {
            let rel = match c.relation {
                Relation::AtMost => "<=",
                Relation::AtLeast => ">=",
                Relation::Above => ">",
            };
            s.push_str(&format!("; {} = {:e} not {rel} {:e}", c.name, c.value, c.bound));
        }
        s
    }
}

pub const TITLES: [&str; 8] = [
    "exact identities",
    "bounds on random defects",
    "order-of-accuracy fits",
    "dielectric matrix",
    "Pekar solver",
    "macroscopic limit of F_crys",
    "counterexample",
    "polaron energy asymptotics",
];

/// Runs criterion `id` (1 to 8). `choquard_e0` is the coupling-one Choquard energy the Pekar
/// scaling law is compared with.
pub fn run(id: u32, lab: &Lab, choquard_e0: f64) -> Outcome {
    let start = Instant::now();
    let mut checks = vec![];
    let res = match id {
        1 => exact_identities(lab, &mut checks),
        2 => bounds(lab, &mut checks),
        3 => orders(lab, &mut checks),
        4 => dielectric(lab, &mut checks),
        5 => pekar(choquard_e0, &mut checks),
        6 => macrolimit(lab, &mut checks).map(|_| ()),
        7 => counterexample(lab, &mut checks).map(|_| ()),
        8 => polaron(lab, &mut checks).map(|_| ()),
        _ => Err(Error::Config(format!("no criterion {id}"))),
    };
    Outcome {
        id,
        title: TITLES.get(id as usize - 1).copied().unwrap_or("unknown").into(),
        checks,
        error: res.err().map(|e| e.to_string()),
        runtime_seconds: start.elapsed().as_secs_f64(),
    }
}

/// Sum of three Gaussians with random centres, widths in `widths` and charges in `charges`.
pub fn random_defect(domain: &Arc<Domain>, seed: u64, widths: (f64, f64), charges: (f64, f64)) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = Field::zeros(domain, FieldKind::Density);
    for _ in 0..3 {
        let c = domain.lattice.basis * Vector3::new(rng.gen(), rng.gen(), rng.gen());
        f.axpy(1.0, &gaussian_density(domain, c, rng.gen_range(widths.0..widths.1), rng.gen_range(charges.0..charges.1)));
    }
    f
}

fn small_context(lab: &Lab) -> Result<ResponseContext> {
    ResponseContext::new(lab.crystal.clone(), [2; 3], lab.cfg.response.options())
}

fn exact_identities(lab: &Lab, checks: &mut Vec<Check>) -> Result<()> {
    let crystal = &lab.crystal;
    let m = 0.25;
    let cell = solve_u_per(&crystal.v0, m)?;
    let md = macro_domain(&crystal.domain, m, 4);
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let psi = initial_gaussian(&md, 1.5, 0.5, seed);
        let (_, rep) = energy_decouple(&psi, &cell, m)?;
        worst = worst.max(rep.relative_residual);
    }
    checks.push(Check::at_most("decoupling_relative_residual", worst, 1e-11));

    let ctx = small_context(lab)?;
    let nu = random_defect(&ctx.sc.domain, 101, (1.5, 3.0), (-0.15, 0.15));
    let state = scf_defect(&ctx, &nu, &lab.cfg.defect)?;
    checks.push(Check::at_most("projector_identity", state.projector_identity_defect(), 1e-10));

    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let nu = random_defect(&ctx.sc.domain, 200 + seed, (1.5, 3.0), (-0.3, 0.3));
        worst = worst.max(ctx.kinetic_identity_residual(&nu)?);
    }
    checks.push(Check::at_most("kinetic_identity_relative_residual", worst, 1e-9));

    let res = matrix_analog_residuals(&[0.02, 0.01, 0.005])?;
    let (order, _) = power_fit(&[0.02, 0.01, 0.005], &res)?;
    checks.push(Check::at_least("matrix_analog_order_low", order, 0.9));
    checks.push(Check::at_most("matrix_analog_order_high", order, 1.1));
    checks.push(Check::flag("matrix_analog_residual_decreasing", res.windows(2).all(|w| w[1] < w[0])));

    let d = Domain::new(Lattice::cubic(12.0), [24; 3]);
    let rho = random_defect(&d, 7, (0.9, 1.5), (0.2, 1.0));
    let eps = DielectricMatrix { eps: Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0)), report: None };
    let a = pekar_interaction(&rho, &eps)?;
    let b = pekar_interaction_real_space(&rho, &eps)?;
    checks.push(Check::at_most("pekar_double_evaluation", (a - b).abs() / a.abs(), 1e-10));
    Ok(())
}

/// Residuals of the finite-matrix kinetic identity on a seeded 20x20 problem with 8 occupied
/// levels, for perturbation sizes `ts`.
pub fn matrix_analog_residuals(ts: &[f64]) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 20;
    let mut a = CMat::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = C64::new(if i < 8 { -1.0 } else { 1.0 } + rng.gen_range(-0.3..0.3), 0.0);
    }
    let mut b = CMat::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let z = C64::new(rng.gen_range(-1.0..1.0), if i == j { 0.0 } else { rng.gen_range(-1.0..1.0) });
            b[(i, j)] = z;
            b[(j, i)] = z.conj();
        }
    }
    ts.iter()
        .map(|t| {
            let mut bt = b.clone();
            bt.scale(C64::new(*t, 0.0));
            matrix_kinetic_identity_residual(&a, &bt, 8)
        })
        .collect()
}

fn bounds(lab: &Lab, checks: &mut Vec<Check>) -> Result<()> {
    let ctx = small_context(lab)?;
    let (mut f_low, mut f_high, mut rho_bound, mut b_low, mut b_high, mut fp) = (0, 0, 0, 0, 0, 0);
    let md = macro_domain(&lab.crystal.domain, 0.5, 2);
    let eps = lab.dielectric_pair()?.0;
    for seed in 0..10 {
        let nu = random_defect(&ctx.sc.domain, 300 + seed, (1.5, 3.0), (-0.15, 0.15));
        let s = scf_defect(&ctx, &nu, &lab.cfg.defect)?;
        let dnn = s.d_nu_nu();
        let slack = 1e-12 * dnn;
        f_low += (s.f_crys < -0.5 * dnn - slack) as usize;
        f_high += (s.f_crys > slack) as usize;
        rho_bound += (s.d_rho_rho() > 4.0 * dnn + slack) as usize;

        let macro_nu = random_defect(&md, 400 + seed, (0.75, 1.5), (-0.3, 0.3));
        let b = ctx.b_m_self(&macro_nu, 0.5)?;
        let d = coulomb_d_unchecked(&macro_nu, &macro_nu);
        b_low += (b < -1e-12 * d) as usize;
        b_high += (b > d * (1.0 + 1e-12)) as usize;
        fp += (pekar_interaction(&macro_nu, &eps)? > 0.0) as usize;
    }
    checks.push(Check::at_most("f_crys_below_lower_bound", f_low as f64, 0.0));
    checks.push(Check::at_most("f_crys_positive", f_high as f64, 0.0));
    checks.push(Check::at_most("rho_q_coulomb_bound", rho_bound as f64, 0.0));
    checks.push(Check::at_most("b_m_negative", b_low as f64, 0.0));
    checks.push(Check::at_most("b_m_above_coulomb", b_high as f64, 0.0));
    checks.push(Check::at_most("pekar_interaction_positive", fp as f64, 0.0));
    Ok(())
}

/// Defect-strength sweep used by the order fits.
pub const T_LIST: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

fn orders(lab: &Lab, checks: &mut Vec<Check>) -> Result<()> {
    let table = e_per_convergence(&lab.crystal.v0, &lab.cfg.cellmode.m_list)?;
    checks.push(Check::at_least("u_per_expansion_order", table.mode_order.unwrap_or(f64::NAN), 1.9));
    checks.push(Check::at_least("e_per_order", table.energy_order.unwrap_or(f64::NAN), 0.9));

    let ctx = small_context(lab)?;
    let base = gaussian_density(&ctx.sc.domain, ctx.sc.domain.lattice.basis * Vector3::new(0.5, 0.5, 0.5), 3.0, 1.0);
    let (mut lin, mut r2, mut fdiff) = (vec![], vec![], vec![]);
    for &t in &T_LIST {
        let nu = base.scaled(t);
        let s = scf_defect(&ctx, &nu, &lab.cfg.defect)?;
        let kn = ctx.apply_k(&nu)?;
        let e = s.rho_q.add(&kn);
        lin.push(coulomb_d_unchecked(&e, &e).max(0.0).sqrt());
        r2.push(decompose_resolvent(&ctx, &s)?.r2_norm.total());
        fdiff.push((s.f_crys - ctx.f_aux(&nu)?).abs());
    }
    checks.push(Check::at_least("linear_density_order", power_fit(&T_LIST, &lin)?.0, 1.8));
    checks.push(Check::at_least("r2_order", power_fit(&T_LIST, &r2)?.0, 1.8));
    checks.push(Check::at_least("f_crys_minus_f_aux_order", power_fit(&T_LIST, &fdiff)?.0, 2.7));
    Ok(())
}

/// Crystal with no electrons and no nuclei, otherwise the reference setup.
pub fn vacuum_crystal(reference: &CrystalConfig) -> Result<CrystalGroundState> {
    CrystalConfig { sites: vec![], z: 0, ..reference.clone() }.solve()
}

fn dielectric(lab: &Lab, checks: &mut Vec<Check>) -> Result<()> {
    let eps = lab.dielectric_pair()?.0;
    let e = eps.eps;
    checks.push(Check::at_most("asymmetry", (e - e.transpose()).abs().max(), 1e-10));
    let ev = eps.eigenvalues();
    checks.push(Check::above("smallest_eigenvalue", ev[0], 1.0));
    let mean = e.trace() / 3.0;
    let off = (0..3).flat_map(|i| (0..3).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| e[(i, j)].abs()).fold(0.0, f64::max);
    checks.push(Check::at_most("off_diagonal_over_mean", off / mean, 1e-3));
    let (lo, hi) = (0..3).map(|i| e[(i, i)]).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    checks.push(Check::at_most("diagonal_spread", (hi - lo) / mean, 1e-3));
    checks.push(Check::at_most("regression", (mean - REFERENCE_EPS).abs() / REFERENCE_EPS, 1e-8));

    let vac = Arc::new(vacuum_crystal(&lab.cfg.crystal)?);
    let ctx = ResponseContext::new(vac, [3; 3], lab.cfg.response.options())?;
    let ve = extract_eps_m(&ctx)?;
    checks.push(Check::flag("vacuum_is_identity", ve.eps == Matrix3::identity()));
    Ok(())
}

/// Box and grid for the whole-space Pekar checks.
pub fn pekar_box() -> Arc<Domain> {
    Domain::new(Lattice::cubic(96.0), [80; 3])
}

fn pekar(e0: f64, checks: &mut Vec<Check>) -> Result<()> {
    let d = pekar_box();
    let opts = FlowOptions { tol: 1e-8, shell_tol: 1e-5, ..FlowOptions::default() };
    let mut worst_scaling: f64 = 0.0;
    for e in [2.0, 4.0, 8.0] {
        let eps = DielectricMatrix::isotropic(e);
        let s = solve_pekar_ground(&eps, &d, PekarKernel::truncated_for(&d, &eps), &opts)?;
        let kappa = 1.0 - 1.0 / e;
        let rel = (s.energy - kappa * kappa * e0).abs() / (kappa * kappa * e0).abs();
        if e == 2.0 {
            checks.push(Check::at_most("oracle_relative_error", rel, 1e-4));
            checks.push(Check::at_most("virial_residual", s.virial_defect(), 1e-4));
        }
        worst_scaling = worst_scaling.max(rel);
    }
    checks.push(Check::at_most("scaling_law_relative_error", worst_scaling, 1e-3));
    Ok(())
}

fn macrolimit(lab: &Lab, checks: &mut Vec<Check>) -> Result<ConvergenceReport> {
    let rep = run_macrolimit(lab)?;
    let failed = rep.rows.iter().filter(|r| r.status != "ok").count();
    checks.push(Check::at_most("failed_rows", failed as f64, 0.0));
    checks.push(Check::flag("difference_decreasing", rep.monotone_decreasing_difference()));
    let ex = rep.extrapolated.unwrap_or(f64::NAN);
    checks.push(Check::at_most("extrapolated_over_error_bar", ex.abs() / rep.error_bar, 1.0));
    Ok(rep)
}

fn counterexample(lab: &Lab, checks: &mut Vec<Check>) -> Result<ConvergenceReport> {
    let rep = run_counterexample(lab)?;
    let failed = rep.rows.iter().filter(|r| r.status != "ok").count();
    checks.push(Check::at_most("failed_rows", failed as f64, 0.0));
    let spread = rep.checks.get("b_relative_spread").copied().unwrap_or(f64::NAN);
    checks.push(Check::at_most("b_relative_spread", spread, lab.cfg.response.cg_tol));
    let ratio = rep.checks.get("gap_over_error_bar").copied().unwrap_or(f64::NAN);
    checks.push(Check::above("gap_over_error_bar", ratio, 5.0));
    Ok(rep)
}

fn polaron(lab: &Lab, checks: &mut Vec<Check>) -> Result<ConvergenceReport> {
    let rep = run_polaron_limit(lab)?;
    let rel = rep.checks.get("relative_error_smallest_m").copied().unwrap_or(f64::NAN);
    checks.push(Check::at_most("relative_error_smallest_m", rel, 0.1));
    let dec = rep.checks.get("distance_decreasing").copied().unwrap_or(0.0);
    checks.push(Check::flag("density_distance_decreasing", dec == 1.0));
    Ok(rep)
}

/// Lab on the reference configuration.
pub fn reference_lab(cfg: Config) -> Result<Lab> {
    let crystal = Arc::new(cfg.crystal.solve()?);
    Ok(Lab::new(cfg, crystal))
}
