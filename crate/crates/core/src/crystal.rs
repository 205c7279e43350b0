//! Periodic reduced Hartree-Fock ground state of the host crystal.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::Vector3;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{coulomb_d_unchecked, poisson_periodic, BZMesh, Domain, Field, FieldKind, PlaneWaveBasis};
use crate::linalg::{eigh, CMat};

/// A nuclear site: Cartesian position and charge.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Site {
    pub position: [f64; 3],
    pub charge: f64,
}

#[derive(Clone, Debug)]
pub struct BlochEigensystem {
    pub mesh: BZMesh,
    pub n_bands: usize,
    /// `eigenvalues[q][n]`, ascending in `n`.
    pub eigenvalues: Vec<Vec<f64>>,
    /// Plane-wave coefficients, one column per band.
    pub vectors: Vec<CMat>,
}

impl BlochEigensystem {
    pub fn max_orthonormality_defect(&self) -> f64 {
        self.vectors
            .iter()
            .map(|v| {
                let s = CMat::mul(v, crate::linalg::Op::C, v, crate::linalg::Op::N);
                s.sub(&CMat::identity(v.cols)).frobenius()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct CrystalGroundState {
    pub basis: PlaneWaveBasis,
    pub domain: Arc<Domain>,
    pub mu0: Field,
    pub rho0: Field,
    pub v0: Field,
    pub bloch: BlochEigensystem,
    pub z: usize,
    pub fermi_level: f64,
    pub gap: f64,
    pub scf_residual: f64,
    pub iterations: usize,
    /// rHF energy per cell (kinetic plus electrostatic, jellium convention).
    pub energy: f64,
}

/// Periodized Gaussian nuclei, restricted to the wavevectors that couple plane waves of
/// `basis` (differences of basis vectors).
pub fn nuclear_density(basis: &PlaneWaveBasis, domain: &Arc<Domain>, sites: &[Site], sigma: f64) -> Field {
    let mut mu = Field::zeros(domain, FieldKind::Density);
    let vol = basis.lattice.cell_volume;
    for g in difference_set(basis) {
        let k = basis.lattice.gcart(g);
        let idx = domain.index_of_freq(g).expect("difference set fits the cell grid");
        let mut s = C64::new(0.0, 0.0);
        for site in sites {
            let r = Vector3::from(site.position);
            s += C64::from_polar(site.charge, -k.dot(&r));
        }
        mu.coeffs[idx] = s * ((-0.5 * sigma * sigma * k.norm_squared()).exp() / vol);
    }
    mu
}

/// Sorted set `{G - G'}` over pairs of basis vectors.
pub fn difference_set(basis: &PlaneWaveBasis) -> Vec<[i32; 3]> {
    let mut set = std::collections::BTreeSet::new();
    for a in &basis.gvectors {
        for b in &basis.gvectors {
            set.insert([a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
        }
    }
    set.into_iter().collect()
}

/// Bloch fibre `1/2 |G + q|^2 + v` on the plane-wave basis; `q` in reduced coordinates.
pub fn bloch_hamiltonian(basis: &PlaneWaveBasis, v: &Field, q: [f64; 3]) -> CMat {
    let lat = &basis.lattice;
    let qc = lat.reciprocal * Vector3::from(q);
    let n = basis.len();
    let d = &v.domain;
    let mut h = CMat::zeros(n, n);
    for (j, gj) in basis.gvectors.iter().enumerate() {
        for (i, gi) in basis.gvectors.iter().enumerate() {
            let diff = [gi[0] - gj[0], gi[1] - gj[1], gi[2] - gj[2]];
            let idx = d.index_of_freq(diff).expect("potential grid covers differences");
            h[(i, j)] = v.coeffs[idx];
        }
        h[(j, j)] += C64::new(0.5 * (lat.gcart(*gj) + qc).norm_squared(), 0.0);
    }
    h
}

/// Bands of `-Delta/2 + v` on every mesh point.
pub fn bloch_bands(basis: &PlaneWaveBasis, v: &Field, mesh: &BZMesh, n_bands: usize) -> Result<BlochEigensystem> {
    let n_bands = n_bands.min(basis.len());
    let res: Vec<Result<(Vec<f64>, CMat)>> = mesh
        .points
        .par_iter()
        .map(|q| {
            let h = bloch_hamiltonian(basis, v, *q);
            let e = eigh(&h, n_bands, true)?;
            Ok((e.values, e.vectors.expect("vectors requested")))
        })
        .collect();
    let mut eigenvalues = Vec::with_capacity(mesh.len());
    let mut vectors = Vec::with_capacity(mesh.len());
    for r in res {
        let (w, v) = r?;
        eigenvalues.push(w);
        vectors.push(v);
    }
    Ok(BlochEigensystem { mesh: mesh.clone(), n_bands, eigenvalues, vectors })
}

/// Gap between bands `z` and `z+1` over the mesh, and the midpoint Fermi level.
pub fn check_gap(bloch: &BlochEigensystem, z: usize) -> Result<(f64, f64)> {
    if bloch.n_bands < z + 1 {
        return Err(Error::Invariant(format!("{} bands computed, need at least {}", bloch.n_bands, z + 1)));
    }
    let lowest = bloch.eigenvalues.iter().map(|e| e[0]).fold(f64::INFINITY, f64::min);
    if z == 0 {
        return Ok((f64::INFINITY, lowest - 1.0));
    }
    let top = bloch.eigenvalues.iter().map(|e| e[z - 1]).fold(f64::NEG_INFINITY, f64::max);
    let bottom = bloch.eigenvalues.iter().map(|e| e[z]).fold(f64::INFINITY, f64::min);
    let gap = bottom - top;
    if !(gap > 0.0) {
        return Err(Error::NoGap { gap });
    }
    Ok((gap, 0.5 * (top + bottom)))
}

/// Cell-periodic parts `u = sum_G c_G e^{iG.x}` of the given columns on the cell grid
/// (one column per band, grid points along rows).
pub fn periodic_parts(basis: &PlaneWaveBasis, domain: &Domain, coeffs: &CMat, bands: usize) -> CMat {
    let n = domain.len();
    let mut out = CMat::zeros(n, bands);
    let idx: Vec<usize> = basis
        .gvectors
        .iter()
        .map(|g| domain.index_of_freq(*g).expect("basis fits the cell grid"))
        .collect();
    for b in 0..bands {
        let col = out.col_mut(b);
        for (row, &i) in idx.iter().enumerate() {
            col[i] = coeffs[(row, b)];
        }
        domain.inverse_inplace(col);
    }
    out
}

fn band_density(basis: &PlaneWaveBasis, domain: &Arc<Domain>, bloch: &BlochEigensystem, z: usize) -> Field {
    let n = domain.len();
    let mut acc = vec![0.0f64; n];
    let partial: Vec<Vec<f64>> = (0..bloch.mesh.len())
        .into_par_iter()
        .map(|q| {
            let u = periodic_parts(basis, domain, &bloch.vectors[q], z);
            let mut s = vec![0.0f64; n];
            for b in 0..z {
                for (x, c) in s.iter_mut().zip(u.col(b)) {
                    *x += c.norm_sqr();
                }
            }
            s
        })
        .collect();
    for (q, s) in partial.iter().enumerate() {
        let w = bloch.mesh.weights[q];
        for (a, x) in acc.iter_mut().zip(s) {
            *a += w * x;
        }
    }
    let vol = basis.lattice.cell_volume;
    for a in &mut acc {
        *a /= vol;
    }
    Field::from_real_values(domain, &acc, FieldKind::Density)
}

fn kinetic_energy(basis: &PlaneWaveBasis, bloch: &BlochEigensystem, z: usize) -> f64 {
    let lat = &basis.lattice;
    let mut t = 0.0;
    for (q, qv) in bloch.mesh.points.iter().enumerate() {
        let qc = lat.reciprocal * Vector3::from(*qv);
        for b in 0..z {
            for (row, g) in basis.gvectors.iter().enumerate() {
                t += bloch.mesh.weights[q] * 0.5 * (lat.gcart(*g) + qc).norm_squared() * bloch.vectors[q][(row, b)].norm_sqr();
            }
        }
    }
    t
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScfOptions {
    pub n_bands: usize,
    pub mix: f64,
    pub tol: f64,
    pub max_iter: usize,
}

/// Self-consistent periodic rHF ground state with `z` electrons per cell.
pub fn scf_crystal(
    mu0: &Field,
    basis: &PlaneWaveBasis,
    bz: &BZMesh,
    z: usize,
    opts: &ScfOptions,
) -> Result<CrystalGroundState> {
    if !(opts.mix > 0.0 && opts.mix <= 1.0) {
        return Err(Error::Config(format!("mixing parameter {} not in (0,1]", opts.mix)));
    }
    let charge = mu0.integral();
    if (charge - z as f64).abs() > 1e-8 {
        return Err(Error::Config(format!("nuclear charge {charge} differs from z = {z}")));
    }
    let domain = mu0.domain.clone();
    let n_bands = opts.n_bands.max(z + 1);
    let mut rho = mu0.clone();
    let mut residual = f64::INFINITY;
    let mut last_energy = f64::INFINITY;
    for it in 0..=opts.max_iter {
        let v = poisson_periodic(&rho.sub(mu0), basis)?;
        let bloch = bloch_bands(basis, &v, bz, n_bands)?;
        let rho_out = if z == 0 { Field::zeros(&domain, FieldKind::Density) } else { band_density(basis, &domain, &bloch, z) };
        let delta = rho_out.sub(&rho);
        residual = coulomb_d_unchecked(&delta, &delta).max(0.0).sqrt();
        let diff = rho.sub(mu0);
        let energy = kinetic_energy(basis, &bloch, z) + 0.5 * coulomb_d_unchecked(&diff, &diff);
        tracing::debug!(iteration = it, residual, energy, "crystal scf");
        if energy > last_energy + 1e-12 {
            tracing::debug!(iteration = it, "crystal scf energy increased");
        }
        last_energy = energy;
        if residual <= opts.tol {
            let (gap, fermi_level) = check_gap(&bloch, z)?;
            return Ok(CrystalGroundState {
                basis: basis.clone(),
                domain,
                mu0: mu0.clone(),
                rho0: rho,
                v0: v,
                bloch,
                z,
                fermi_level,
                gap,
                scf_residual: residual,
                iterations: it,
                energy,
            });
        }
        rho.axpy(opts.mix, &delta);
    }
    Err(Error::NoConvergence { what: "crystal scf", iterations: opts.max_iter, residual })
}

/// Residual of the periodic Poisson equation for the stored ground state.
pub fn poisson_residual(gs: &CrystalGroundState) -> f64 {
    let d = &gs.domain;
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for i in 1..d.len() {
        let lhs = gs.v0.coeffs[i] * d.k2(i);
        let rhs = (gs.rho0.coeffs[i] - gs.mu0.coeffs[i]) * (4.0 * PI);
        worst = worst.max((lhs - rhs).norm());
        scale = scale.max(rhs.norm());
    }
    if scale > 0.0 {
        worst / scale
    } else {
        worst
    }
}
