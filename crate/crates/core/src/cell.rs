//! Microscopic cell mode `u_m^per` of `-Delta/(2m) + V0`, the profile `f_per`, and the
//! exact energy decoupling between micro and macro scales.

use std::sync::Arc;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::power_fit;
use crate::lattice::{Domain, Field, FieldKind};
use crate::linalg::{eigh, CMat};

#[derive(Clone, Debug)]
pub struct CellMode {
    pub m: f64,
    pub v0: Field,
    /// Positive ground mode on the cell grid, `int_cell u^2 = |cell|`.
    pub u: Field,
    /// Lowest eigenvalue of `-Delta/(2m) + V0` on the cell.
    pub e_per_m: f64,
    /// Distance to the second eigenvalue.
    pub spectral_gap: f64,
    pub f: Field,
    /// Cell average of `V0 f_per`, the limit of `e_per_m / m`.
    pub e_per_limit: f64,
    /// `||(H - e) u|| / ||u||` on the grid.
    pub residual: f64,
}

/// Zero-mean solution of `-Delta f / 2 = -V0`.
pub fn solve_f_per(v0: &Field) -> Field {
    let d = &v0.domain;
    let mut f = Field::zeros(d, FieldKind::Potential);
    for i in 1..d.len() {
        f.coeffs[i] = v0.coeffs[i] * (-2.0 / d.k2(i));
    }
    f
}

/// `int_cell V0 f`.
pub fn int_v_f(v0: &Field, f: &Field) -> f64 {
    v0.l2_dot(f).re
}

/// Collocation matrix of `-Delta/(2m) + V0` on the real-space cell grid.
fn cell_operator(v0: &Field, m: f64) -> CMat {
    let d = &v0.domain;
    let n = d.len();
    let v = v0.real_values();
    let mut h = CMat::zeros(n, n);
    let mut unit = vec![C64::new(0.0, 0.0); n];
    for j in 0..n {
        unit.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        unit[j] = C64::new(1.0, 0.0);
        d.forward_inplace(&mut unit);
        for (i, z) in unit.iter_mut().enumerate() {
            *z *= d.k2(i) / (2.0 * m);
        }
        d.inverse_inplace(&mut unit);
        h.col_mut(j).copy_from_slice(&unit);
        h[(j, j)] += C64::new(v[j], 0.0);
    }
    h
}

pub fn solve_u_per(v0: &Field, m: f64) -> Result<CellMode> {
    if !(m > 0.0 && m <= 1.0) {
        return Err(Error::Config(format!("effective mass {m} not in (0,1]")));
    }
    let d = &v0.domain;
    let n = d.len();
    let h = cell_operator(v0, m);
    let e = eigh(&h, 2, true)?;
    let spectral_gap = e.values[1] - e.values[0];
    if spectral_gap < 1e-10 {
        return Err(Error::DegenerateGroundState { gap: spectral_gap });
    }
    let vecs = e.vectors.expect("vectors requested");
    let col = vecs.col(0);
    let s: C64 = col.iter().sum();
    let phase = s.conj() / s.norm();
    let norm = (n as f64).sqrt();
    let u: Vec<f64> = col.iter().map(|z| (z * phase).re * norm).collect();
    if let Some(bad) = u.iter().cloned().find(|x| !(*x > 0.0)) {
        return Err(Error::Invariant(format!("cell ground mode is not positive (value {bad:e})")));
    }
    let uc: Vec<C64> = u.iter().map(|&x| C64::new(x, 0.0)).collect();
    let hu = h.matvec(&uc);
    let residual = hu
        .iter()
        .zip(&uc)
        .map(|(a, b)| (a - b * e.values[0]).norm_sqr())
        .sum::<f64>()
        .sqrt()
        / norm;
    let f = solve_f_per(v0);
    let e_per_limit = int_v_f(v0, &f) / d.volume();
    Ok(CellMode {
        m,
        v0: v0.clone(),
        u: Field::from_real_values(d, &u, FieldKind::WavefunctionWeight),
        e_per_m: e.values[0],
        spectral_gap,
        f,
        e_per_limit,
        residual,
    })
}

/// `||u - 1 - m f||_inf` on the cell grid.
pub fn expansion_defect(cell: &CellMode) -> f64 {
    let u = cell.u.real_values();
    let f = cell.f.real_values();
    u.iter().zip(&f).map(|(a, b)| (a - 1.0 - cell.m * b).abs()).fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EperRow {
    pub m: f64,
    pub e_over_m: f64,
    pub e_per: f64,
    pub difference: f64,
    pub expansion_defect: f64,
    pub spectral_gap: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EperTable {
    pub rows: Vec<EperRow>,
    /// Fitted order in `m` of `e_per_m/m - E_per`, when the differences are nonzero.
    pub energy_order: Option<f64>,
    /// Fitted order in `m` of `||u - 1 - m f||_inf`.
    pub mode_order: Option<f64>,
}

pub fn e_per_convergence(v0: &Field, m_list: &[f64]) -> Result<EperTable> {
    if m_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("m_list must be strictly decreasing".into()));
    }
    let mut rows = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let c = solve_u_per(v0, m)?;
        let e_over_m = c.e_per_m / m;
        rows.push(EperRow {
            m,
            e_over_m,
            e_per: c.e_per_limit,
            difference: e_over_m - c.e_per_limit,
            expansion_defect: expansion_defect(&c),
            spectral_gap: c.spectral_gap,
        });
    }
    let ms: Vec<f64> = rows.iter().map(|r| r.m).collect();
    let diffs: Vec<f64> = rows.iter().map(|r| r.difference).collect();
    let defects: Vec<f64> = rows.iter().map(|r| r.expansion_defect).collect();
    let order = |ys: &[f64]| {
        if ys.iter().all(|y| y.abs() > 1e-13) && ys.len() >= 2 {
            power_fit(&ms, ys).ok().map(|p| p.0)
        } else {
            None
        }
    };
    Ok(EperTable { energy_order: order(&diffs), mode_order: order(&defects), rows })
}

/// Macro box holding `p` scaled cells per axis, with a grid commensurate with the cell grid.
pub fn macro_domain(cell_domain: &Domain, m: f64, p: usize) -> Arc<Domain> {
    let lat = cell_domain.lattice.repeated([p; 3]).scaled(m);
    let dims = cell_domain.dims.map(|d| d * p);
    Domain::new(lat, dims)
}

/// Values of the cell field at `x/m` on every point of the macro grid.
pub fn tile_onto(cell_values: &[f64], cell: &Domain, target: &Domain, m: f64) -> Result<Vec<f64>> {
    let mut p = [0usize; 3];
    for i in 0..3 {
        if target.dims[i] % cell.dims[i] != 0 {
            return Err(Error::IncommensurateGrids(format!(
                "macro grid {:?} is not a multiple of cell grid {:?}",
                target.dims, cell.dims
            )));
        }
        p[i] = target.dims[i] / cell.dims[i];
    }
    let expect = cell.lattice.repeated(p).scaled(m);
    if !target.lattice.approx_eq(&expect, 1e-12) {
        return Err(Error::IncommensurateGrids(format!(
            "macro box is not {p:?} cells scaled by m = {m}"
        )));
    }
    Ok((0..target.len())
        .map(|i| {
            let s = target.unflatten(i);
            cell_values[cell.flatten([0, 1, 2].map(|a| s[a] % cell.dims[a]))]
        })
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoupleReport {
    /// `1/2 int |grad psi|^2 + m^-1 int V0(x/m) |psi|^2`.
    pub lhs: f64,
    /// `m^-1 e_per_m + weighted_kinetic`.
    pub rhs: f64,
    pub relative_residual: f64,
    pub kinetic: f64,
    pub potential: f64,
    pub weighted_kinetic: f64,
    /// `1/2 int u^2 |grad psi_pol|^2` with spectral gradients; differs from
    /// `weighted_kinetic` by the grid's product aliasing.
    pub naive_weighted_kinetic: f64,
    /// `int u(x/m)^2 |psi_pol|^2`.
    pub tilde_density_mass: f64,
}

fn kinetic(psi: &Field) -> f64 {
    let d = &psi.domain;
    0.5 * d.volume() * psi.coeffs.iter().enumerate().map(|(i, c)| d.k2(i) * c.norm_sqr()).sum::<f64>()
}

/// Split `psi = u(x/m) psi_pol` and evaluate both sides of the decoupling identity.
///
/// The weighted kinetic term is evaluated in weak form as
/// `1/2 (<u phi, -Delta(u phi)> - <|phi|^2, u (-Delta u)>)`, with `-Delta u` computed on
/// the macro grid from the tiled mode, so the identity holds up to the cell eigen-residual.
pub fn energy_decouple(psi: &Field, cell: &CellMode, m: f64) -> Result<(Field, DecoupleReport)> {
    if (m - cell.m).abs() > 1e-14 * m {
        return Err(Error::Config(format!("cell mode was solved at m = {}, not {m}", cell.m)));
    }
    let d = &psi.domain;
    let cd = &cell.u.domain;
    let u = tile_onto(&cell.u.real_values(), cd, d, m)?;
    let v = tile_onto(&cell.v0.real_values(), cd, d, m)?;
    let norm2 = psi.l2_dot(psi).re;
    if (norm2 - 1.0).abs() > 1e-10 {
        return Err(Error::Invariant(format!("psi has norm^2 {norm2}, expected 1")));
    }
    let vals = psi.values();
    let dv = d.dv();
    let phi: Vec<C64> = vals.iter().zip(&u).map(|(z, w)| z / *w).collect();
    let psi_pol = Field::from_values(d, &phi, FieldKind::WavefunctionWeight);

    let t = kinetic(psi);
    let potential: f64 = vals.iter().zip(&v).map(|(z, w)| w * z.norm_sqr()).sum::<f64>() * dv / m;
    let lhs = t + potential;

    let uf = Field::from_real_values(d, &u, FieldKind::WavefunctionWeight);
    let mut lap = uf.clone();
    for (i, c) in lap.coeffs.iter_mut().enumerate() {
        *c *= d.k2(i);
    }
    let minus_lap_u = lap.real_values();
    let curvature: f64 =
        phi.iter().zip(&u).zip(&minus_lap_u).map(|((p, w), l)| p.norm_sqr() * w * l).sum::<f64>() * dv;
    let weighted_kinetic = t - 0.5 * curvature;
    let rhs = cell.e_per_m * norm2 / m + weighted_kinetic;

    let mut naive = 0.0;
    for axis in 0..3 {
        let mut g = psi_pol.coeffs.clone();
        for (i, c) in g.iter_mut().enumerate() {
            *c *= C64::new(0.0, d.kvec(i)[axis]);
        }
        let gv = d.inverse(&g);
        naive += gv.iter().zip(&u).map(|(z, w)| w * w * z.norm_sqr()).sum::<f64>();
    }
    let naive_weighted_kinetic = 0.5 * naive * dv;
    let tilde_density_mass = phi.iter().zip(&u).map(|(p, w)| w * w * p.norm_sqr()).sum::<f64>() * dv;

    let scale = lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
    let report = DecoupleReport {
        lhs,
        rhs,
        relative_residual: (lhs - rhs).abs() / scale,
        kinetic: t,
        potential,
        weighted_kinetic,
        naive_weighted_kinetic,
        tilde_density_mass,
    };
    Ok((psi_pol, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{gaussian_density, Lattice, PlaneWaveBasis};
    use nalgebra::Vector3;
    use std::f64::consts::PI;

    fn unit_cell() -> Arc<Domain> {
        PlaneWaveBasis::new(Lattice::cubic(1.0), 2.0 * PI * PI * 1.01).unwrap().cell_domain()
    }

    fn cos_mode(d: &Arc<Domain>, c: f64) -> Field {
        let a = d.lattice.basis[(0, 0)];
        Field::from_fn(d, FieldKind::Potential, |x| c * (2.0 * PI * x[0] / a).cos())
    }

    #[test]
    fn f_per_single_mode() {
        let d = unit_cell();
        let f = solve_f_per(&cos_mode(&d, 1.0));
        let expect = Field::from_fn(&d, FieldKind::Potential, |x| -(2.0 * PI * x[0]).cos() / (2.0 * PI * PI));
        assert!(f.sub(&expect).l2_norm() < 1e-14);
        assert!(f.mean().norm() < 1e-15);
    }

    #[test]
    fn vacuum_and_constant_modes() {
        let d = unit_cell();
        let zero = Field::zeros(&d, FieldKind::Potential);
        let c = solve_u_per(&zero, 0.5).unwrap();
        assert!(c.e_per_m.abs() < 1e-12);
        assert!(c.u.real_values().iter().all(|x| (x - 1.0).abs() < 1e-10));
        let mut k = zero.clone();
        k.coeffs[0] = C64::new(0.7, 0.0);
        let c = solve_u_per(&k, 0.5).unwrap();
        assert!((c.e_per_m - 0.7).abs() < 1e-12);
        assert!(c.u.real_values().iter().all(|x| (x - 1.0).abs() < 1e-10));
    }

    #[test]
    fn single_mode_e_per_sign() {
        let d = unit_cell();
        let c = 0.3;
        let v = cos_mode(&d, c);
        let f = solve_f_per(&v);
        let b2 = 4.0 * PI * PI;
        assert!((int_v_f(&v, &f) + c * c / b2).abs() < 1e-14);
        assert!(int_v_f(&v, &f) < 0.0);
    }

    #[test]
    fn mode_invariants_and_expansion() {
        let d = PlaneWaveBasis::new(Lattice::cubic(4.0), 1.5).unwrap().cell_domain();
        let v = cos_mode(&d, 0.2).add(&Field::from_fn(&d, FieldKind::Potential, |x| 0.1 * (2.0 * PI * x[1] / 4.0).sin()));
        let c = solve_u_per(&v, 0.1).unwrap();
        assert!(c.residual < 1e-10);
        assert!((c.u.l2_dot(&c.u).re - d.volume()).abs() < 1e-10 * d.volume());
        let table = e_per_convergence(&v, &[0.2, 0.1, 0.05, 0.025]).unwrap();
        assert!(table.mode_order.unwrap() >= 1.9, "{table:?}");
        assert!(table.energy_order.unwrap() >= 0.9, "{table:?}");
    }

    #[test]
    fn vacuum_table_is_zero() {
        let d = unit_cell();
        let t = e_per_convergence(&Field::zeros(&d, FieldKind::Potential), &[0.5, 0.25]).unwrap();
        assert!(t.rows.iter().all(|r| r.e_over_m.abs() < 1e-10 && r.e_per == 0.0));
        assert!(e_per_convergence(&Field::zeros(&d, FieldKind::Potential), &[0.25, 0.5]).is_err());
    }

    #[test]
    fn decoupling_identity_on_gaussian() {
        let cd = PlaneWaveBasis::new(Lattice::cubic(4.0), 1.5).unwrap().cell_domain();
        let v = cos_mode(&cd, 0.2);
        let m = 0.25;
        let c = solve_u_per(&v, m).unwrap();
        let md = macro_domain(&cd, m, 4);
        let centre = md.lattice.basis * Vector3::new(0.5, 0.5, 0.5);
        let g = gaussian_density(&md, centre, 0.6, 1.0);
        let amp: Vec<f64> = g.real_values().iter().map(|x| x.max(0.0).sqrt()).collect();
        let mut psi = Field::from_real_values(&md, &amp, FieldKind::WavefunctionWeight);
        let n = psi.l2_norm();
        psi = psi.scaled(1.0 / n);
        let (_, rep) = energy_decouple(&psi, &c, m).unwrap();
        assert!(rep.relative_residual < 1e-11, "{rep:?}");
        assert!((rep.tilde_density_mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decoupling_rejects_incommensurate_box() {
        let cd = PlaneWaveBasis::new(Lattice::cubic(4.0), 1.5).unwrap().cell_domain();
        let c = solve_u_per(&cos_mode(&cd, 0.2), 0.25).unwrap();
        let wrong = Domain::new(Lattice::cubic(4.1), cd.dims.map(|x| 4 * x));
        let mut psi = Field::zeros(&wrong, FieldKind::WavefunctionWeight);
        psi.coeffs[0] = C64::new(1.0 / wrong.volume().sqrt(), 0.0);
        assert!(matches!(energy_decouple(&psi, &c, 0.25), Err(Error::IncommensurateGrids(_))));
    }
}
