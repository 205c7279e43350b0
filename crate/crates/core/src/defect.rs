//! Nonlinear response of the Fermi sea to an external density on a supercell: the
//! self-consistent projector difference `Q`, the energy `F_crys`, the block structure of `Q`
//! and its splitting into first-order and remainder parts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{coulomb_d_unchecked, coulomb_potential, Field};
use crate::linalg::{eigh, CMat, Op};
use crate::response::ResponseContext;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefectOptions {
    pub mix: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Largest dense Galerkin dimension accepted.
    pub dim_cap: usize,
    /// Precondition the density update with `(1 + L)^{-1}`.
    pub precondition: bool,
    /// Fermi level override; must lie in the unperturbed supercell gap.
    pub fermi_level: Option<f64>,
}

impl Default for DefectOptions {
    fn default() -> Self {
        DefectOptions { mix: 1.0, tol: 1e-10, max_iter: 100, dim_cap: 4096, precondition: true, fermi_level: None }
    }
}

#[derive(Clone, Debug)]
pub struct DefectState {
    pub nu: Field,
    /// `Q = gamma - gamma0` on the Galerkin space.
    pub q: CMat,
    pub rho_q: Field,
    /// `(rho_Q + nu) * |x|^-1`.
    pub potential: Field,
    pub fermi_level: f64,
    pub f_crys: f64,
    /// `Tr |H0 - eF|^{1/2} (Q++ - Q--) |H0 - eF|^{1/2}`.
    pub kinetic: f64,
    /// `sum_a (lambda_a - eF) Q_aa`, the same quantity as a plain trace.
    pub kinetic_trace: f64,
    pub hartree: f64,
    pub cross: f64,
    /// Highest occupied and lowest unoccupied perturbed levels.
    pub homo: f64,
    pub lumo: f64,
    pub iterations: usize,
    pub residual: f64,
    occupied: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    MinusMinus,
    MinusPlus,
    PlusMinus,
    PlusPlus,
}

/// Block of `q` relative to the occupation pattern (`-` occupied, `+` unoccupied).
pub fn block_of(q: &CMat, occupied: &[bool], which: Block) -> CMat {
    let (rows_occ, cols_occ) = match which {
        Block::MinusMinus => (true, true),
        Block::MinusPlus => (true, false),
        Block::PlusMinus => (false, true),
        Block::PlusPlus => (false, false),
    };
    CMat::from_fn(q.rows, q.cols, |i, j| {
        if occupied[i] == rows_occ && occupied[j] == cols_occ {
            q[(i, j)]
        } else {
            num_complex::Complex64::new(0.0, 0.0)
        }
    })
}

impl DefectState {
    pub fn block(&self, which: Block) -> CMat {
        block_of(&self.q, &self.occupied, which)
    }

    /// `||Q^2 - (Q++ - Q--)||_F`.
    pub fn projector_identity_defect(&self) -> f64 {
        let q2 = self.q.matmul(&self.q);
        q2.sub(&self.block(Block::PlusPlus).sub(&self.block(Block::MinusMinus))).frobenius()
    }

    /// Extreme eigenvalues of `Q++` and `Q--`: `((min, max) of Q++, (min, max) of Q--)`.
    pub fn block_spectra(&self) -> Result<((f64, f64), (f64, f64))> {
        let range = |m: &CMat| -> Result<(f64, f64)> {
            let e = eigh(m, m.rows, false)?.values;
            Ok((e[0], e[e.len() - 1]))
        };
        Ok((range(&self.block(Block::PlusPlus))?, range(&self.block(Block::MinusMinus))?))
    }

    pub fn d_rho_rho(&self) -> f64 {
        coulomb_d_unchecked(&self.rho_q, &self.rho_q)
    }

    pub fn d_nu_nu(&self) -> f64 {
        coulomb_d_unchecked(&self.nu, &self.nu)
    }
}

/// `Tr0 Q = Tr Q++ + Tr Q--`.
pub fn tr0_charge(state: &DefectState) -> f64 {
    state.block(Block::PlusPlus).trace().re + state.block(Block::MinusMinus).trace().re
}

/// Self-consistent `Q = 1(H0 + (rho_Q + nu) * |x|^-1 < eF) - 1(H0 < eF)`.
pub fn scf_defect(ctx: &ResponseContext, nu: &Field, opts: &DefectOptions) -> Result<DefectState> {
    let sc = &ctx.sc;
    let dim = sc.dim();
    if dim > opts.dim_cap {
        return Err(Error::InfeasibleSupercell { dim, cap: opts.dim_cap });
    }
    if !nu.domain.same_as(&sc.domain) {
        return Err(Error::DomainMismatch);
    }
    if !(opts.mix > 0.0 && opts.mix <= 1.0) {
        return Err(Error::Config(format!("mixing parameter {} not in (0,1]", opts.mix)));
    }
    let ef = opts.fermi_level.unwrap_or(sc.fermi_level);
    let occupied: Vec<bool> = sc.energies.iter().map(|&e| e < ef).collect();
    let n_occ = occupied.iter().filter(|&&o| o).count();
    if n_occ != sc.z() * sc.mesh.len() {
        return Err(Error::NoGap { gap: 0.0 });
    }
    let gamma0 = CMat::diag(&occupied.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect::<Vec<_>>());
    let h0 = CMat::diag(&sc.energies);

    let mut rho = ctx.apply_k(nu)?.scaled(-1.0);
    rho.coeffs[0] = num_complex::Complex64::new(0.0, 0.0);
    let mut residual = f64::INFINITY;
    for it in 0..=opts.max_iter {
        let potential = coulomb_potential(&rho.add(nu));
        let mut h = sc.potential_matrix(&potential);
        h.add_assign(&h0, 1.0);
        let count = (n_occ + 1).min(dim);
        let e = eigh(&h, count, true)?;
        let homo = if n_occ > 0 { e.values[n_occ - 1] } else { f64::NEG_INFINITY };
        let lumo = if n_occ < dim { e.values[n_occ] } else { f64::INFINITY };
        if homo >= ef - 1e-8 || lumo <= ef + 1e-8 {
            return Err(Error::GapClosure { homo, lumo, fermi: ef });
        }
        let v = e.vectors.expect("vectors requested");
        let occ = CMat::from_fn(dim, n_occ, |i, j| v[(i, j)]);
        let mut q = CMat::mul(&occ, Op::N, &occ, Op::C);
        q.add_assign(&gamma0, -1.0);
        let rho_out = sc.density_of(&q);
        let delta = rho_out.sub(&rho);
        residual = coulomb_d_unchecked(&delta, &delta).max(0.0).sqrt();
        tracing::debug!(iteration = it, residual, "defect scf");
        if residual <= opts.tol {
            return Ok(assemble(nu.clone(), q, rho, potential, ef, homo, lumo, it, residual, occupied, &sc.energies));
        }
        if it == opts.max_iter {
            break;
        }
        let step = if opts.precondition { ctx.solve_one_plus_l(&delta)? } else { delta };
        rho.axpy(opts.mix, &step);
    }
    Err(Error::NoConvergence { what: "defect scf", iterations: opts.max_iter, residual })
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    nu: Field,
    q: CMat,
    rho_q: Field,
    potential: Field,
    ef: f64,
    homo: f64,
    lumo: f64,
    iterations: usize,
    residual: f64,
    occupied: Vec<bool>,
    energies: &[f64],
) -> DefectState {
    let pp = block_of(&q, &occupied, Block::PlusPlus);
    let mm = block_of(&q, &occupied, Block::MinusMinus);
    let diff = pp.sub(&mm);
    let s: Vec<f64> = energies.iter().map(|e| (e - ef).abs().sqrt()).collect();
    let sandwich = CMat::from_fn(q.rows, q.cols, |i, j| diff[(i, j)] * (s[i] * s[j]));
    let kinetic = sandwich.trace().re;
    let kinetic_trace = (0..q.rows).map(|a| (energies[a] - ef) * q[(a, a)].re).sum();
    let hartree = 0.5 * coulomb_d_unchecked(&rho_q, &rho_q);
    let cross = coulomb_d_unchecked(&nu, &rho_q);
    DefectState {
        f_crys: kinetic + hartree + cross,
        nu,
        q,
        rho_q,
        potential,
        fermi_level: ef,
        kinetic,
        kinetic_trace,
        hartree,
        cross,
        homo,
        lumo,
        iterations,
        residual,
        occupied,
    }
}

pub fn f_crys(ctx: &ResponseContext, nu: &Field, opts: &DefectOptions) -> Result<f64> {
    Ok(scf_defect(ctx, nu, opts)?.f_crys)
}

/// Components of the norm of the space `Q`: Hilbert-Schmidt and trace norms of `Q`, its
/// diagonal blocks, and their `|grad|`-weighted versions.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct QNorm {
    pub s2: f64,
    pub s1_pp: f64,
    pub s1_mm: f64,
    pub grad_s2: f64,
    pub grad_s1_pp: f64,
    pub grad_s1_mm: f64,
}

impl QNorm {
    pub fn total(&self) -> f64 {
        self.s2 + self.s1_pp + self.s1_mm + self.grad_s2 + self.grad_s1_pp + self.grad_s1_mm
    }
}

fn trace_norm(m: &CMat) -> Result<f64> {
    if m.data.iter().all(|z| z.norm() == 0.0) {
        return Ok(0.0);
    }
    Ok(eigh(m, m.rows, false)?.values.iter().map(|x| x.abs()).sum())
}

pub fn q_norm(q: &CMat, occupied: &[bool], abs_grad: &CMat) -> Result<QNorm> {
    let pp = block_of(q, occupied, Block::PlusPlus);
    let mm = block_of(q, occupied, Block::MinusMinus);
    let g_pp_g = abs_grad.matmul(&pp).matmul(abs_grad);
    let g_mm_g = abs_grad.matmul(&mm).matmul(abs_grad);
    Ok(QNorm {
        s2: q.frobenius(),
        s1_pp: trace_norm(&pp)?,
        s1_mm: trace_norm(&mm)?,
        grad_s2: abs_grad.matmul(q).frobenius(),
        grad_s1_pp: trace_norm(&g_pp_g)?,
        grad_s1_mm: trace_norm(&g_mm_g)?,
    })
}

#[derive(Clone, Debug)]
pub struct ResolventSplit {
    pub q1: CMat,
    pub r2: CMat,
    pub q1_norm: QNorm,
    pub r2_norm: QNorm,
}

/// `Q = Q1 + R2` with `Q1` the first-order response to the self-consistent potential.
pub fn decompose_resolvent(ctx: &ResponseContext, state: &DefectState) -> Result<ResolventSplit> {
    let v = ctx.sc.potential_matrix(&state.potential);
    let q1 = ctx.q1_dense(&v);
    let r2 = state.q.sub(&q1);
    let g = ctx.sc.abs_grad()?;
    Ok(ResolventSplit {
        q1_norm: q_norm(&q1, &state.occupied, &g)?,
        r2_norm: q_norm(&r2, &state.occupied, &g)?,
        q1,
        r2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{gaussian_density, FieldKind};
    use crate::response::ResponseOptions;
    use crate::supercell::tests::reference_crystal;
    use nalgebra::Vector3;

    fn ctx(n: [usize; 3]) -> ResponseContext {
        let o = ResponseOptions { n_empty: 4, cg_tol: 1e-11, cg_max_iter: 100, band_tail_tol: 1.0 };
        ResponseContext::new(reference_crystal(), n, o).unwrap()
    }

    fn defect(c: &ResponseContext, charge: f64) -> Field {
        let centre = c.sc.domain.lattice.basis * Vector3::new(0.3, 0.5, 0.6);
        gaussian_density(&c.sc.domain, centre, 1.5, charge)
    }

    #[test]
    fn zero_defect_is_trivial() {
        let c = ctx([2, 1, 1]);
        let nu = Field::zeros(&c.sc.domain, FieldKind::Density);
        let s = scf_defect(&c, &nu, &DefectOptions::default()).unwrap();
        assert!(s.q.frobenius() < 1e-12);
        assert!(s.f_crys.abs() < 1e-14);
        assert!(tr0_charge(&s).abs() < 1e-12);
        let split = decompose_resolvent(&c, &s).unwrap();
        assert!(split.q1_norm.total() < 1e-10 && split.r2_norm.total() < 1e-10);
    }

    #[test]
    fn converged_state_invariants() {
        let c = ctx([2, 2, 1]);
        let nu = defect(&c, 0.1);
        let s = scf_defect(&c, &nu, &DefectOptions::default()).unwrap();
        let dnn = s.d_nu_nu();
        assert!(s.f_crys <= 0.0 && s.f_crys >= -0.5 * dnn, "{} {}", s.f_crys, dnn);
        assert!(s.d_rho_rho() <= 4.0 * dnn);
        assert!(s.kinetic >= 0.0);
        assert!((s.kinetic - s.kinetic_trace).abs() < 1e-12 * s.kinetic.max(1e-300) + 1e-15);
        assert!(s.projector_identity_defect() < 1e-10);
        assert!(tr0_charge(&s).abs() < 1e-8);
        let ((pp_lo, pp_hi), (mm_lo, mm_hi)) = s.block_spectra().unwrap();
        assert!(pp_lo >= -1e-12 && pp_hi <= 1.0 + 1e-12);
        assert!(mm_lo >= -1.0 - 1e-12 && mm_hi <= 1e-12);
    }

    #[test]
    fn unpreconditioned_mixing_reaches_same_state() {
        let c = ctx([2, 1, 1]);
        let nu = defect(&c, 0.1);
        let a = scf_defect(&c, &nu, &DefectOptions::default()).unwrap();
        let o = DefectOptions { mix: 0.5, precondition: false, max_iter: 400, ..DefectOptions::default() };
        let b = scf_defect(&c, &nu, &o).unwrap();
        assert!((a.f_crys - b.f_crys).abs() < 1e-12);
    }

    #[test]
    fn fermi_level_independence() {
        let c = ctx([2, 1, 1]);
        let nu = defect(&c, 0.1);
        let gs = c.crystal();
        let top = gs.fermi_level - 0.5 * gs.gap;
        let mut values = vec![];
        for x in [0.3, 0.5, 0.7] {
            let o = DefectOptions { fermi_level: Some(top + x * gs.gap), ..DefectOptions::default() };
            let s = scf_defect(&c, &nu, &o).unwrap();
            assert!(tr0_charge(&s).abs() < 1e-8);
            values.push(s.f_crys);
        }
        assert!((values[0] - values[2]).abs() < 1e-8 && (values[1] - values[2]).abs() < 1e-8, "{values:?}");
    }

    #[test]
    fn cap_is_enforced() {
        let c = ctx([2, 1, 1]);
        let nu = defect(&c, 0.1);
        let o = DefectOptions { dim_cap: 4, ..DefectOptions::default() };
        assert!(matches!(scf_defect(&c, &nu, &o), Err(Error::InfeasibleSupercell { .. })));
    }
}
