//! Linear response of the Fermi sea on a supercell: the operator `L`, the screened
//! operator `K = 1 - (1 + L)^{-1}`, the auxiliary energy, the rescaled operator `B_m`, the
//! macroscopic dielectric matrix and Pekar's anisotropic interaction.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crystal::CrystalGroundState;
use crate::error::{Error, Result};
use crate::lattice::{coulomb_d_unchecked, coulomb_potential, dilate, dilate_adjoint, mesh_rep, Field, FieldKind};
use crate::linalg::{eigh, gemm, CMat, Op};
use crate::supercell::Supercell;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResponseOptions {
    pub n_empty: usize,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Largest accepted contribution ratio of the highest computed band to the response.
    pub band_tail_tol: f64,
}

impl Default for ResponseOptions {
    fn default() -> Self {
        ResponseOptions { n_empty: 8, cg_tol: 1e-8, cg_max_iter: 200, band_tail_tol: 1e-6 }
    }
}

/// `-chi` restricted to one class of supercell wavevectors `K = k mod n`.
#[derive(Debug)]
struct ChiBlock {
    m: CMat,
    tail: f64,
}

#[derive(Debug)]
pub struct ResponseContext {
    pub sc: Supercell,
    pub opts: ResponseOptions,
    /// Supercell flat indices of each class, in grid order.
    members: Vec<Vec<usize>>,
    /// `(class, position)` of every supercell flat index.
    slot: Vec<(usize, usize)>,
    chi: Vec<OnceLock<ChiBlock>>,
}

impl ResponseContext {
    pub fn new(crystal: Arc<CrystalGroundState>, supercell: [usize; 3], opts: ResponseOptions) -> Result<Self> {
        if opts.n_empty == 0 || !(opts.cg_tol > 0.0) {
            return Err(Error::Config("n_empty must be >= 1 and cg_tol > 0".into()));
        }
        let n_bands = (crystal.z + opts.n_empty).min(crystal.basis.len());
        let sc = Supercell::new(crystal, supercell, n_bands)?;
        let d = &sc.domain;
        let mut members = vec![Vec::new(); sc.mesh.len()];
        let mut slot = Vec::with_capacity(d.len());
        for i in 0..d.len() {
            let k = d.freq(i);
            let c = sc.mesh.index_of([0, 1, 2].map(|a| mesh_rep(k[a], sc.n[a])));
            slot.push((c, members[c].len()));
            members[c].push(i);
        }
        let chi = (0..sc.mesh.len()).map(|_| OnceLock::new()).collect();
        Ok(ResponseContext { sc, opts, members, slot, chi })
    }

    pub fn crystal(&self) -> &CrystalGroundState {
        &self.sc.crystal
    }

    fn complete_bands(&self) -> bool {
        self.sc.n_bands == self.sc.crystal.basis.len()
    }

    /// Builds the class block from the sum over occupied/unoccupied pairs:
    /// `-chi = |supercell| sum s s^H / (lambda_i - lambda_j)`, with `s` the Fourier
    /// coefficients of `psi_i conj(psi_j)` and of `psi_j conj(psi_i)`.
    fn build_block(&self, class: usize) -> ChiBlock {
        let sc = &self.sc;
        let dim = self.members[class].len();
        let k = sc.mesh.labels[class];
        let nb = sc.n_bands;
        let vol = sc.domain.volume();
        let nc = sc.cell_domain.len();
        let mut cols: Vec<Vec<C64>> = Vec::new();
        let mut last: Vec<Vec<C64>> = Vec::new();
        let mut prod = vec![ZERO; nc];
        for qj in 0..sc.mesh.len() {
            let jj = sc.label(qj);
            for sign in [1i32, -1] {
                let qi = sc.mesh.index_of([0, 1, 2].map(|a| jj[a] + sign * k[a]));
                let ji = sc.label(qi);
                for beta in 0..nb {
                    let b = qj * nb + beta;
                    if !sc.occupied(b) {
                        continue;
                    }
                    for alpha in 0..nb {
                        let a = qi * nb + alpha;
                        if sc.occupied(a) {
                            continue;
                        }
                        let (left, right, d) = if sign == 1 {
                            (sc.parts[qi].col(alpha), sc.parts[qj].col(beta), [0, 1, 2].map(|x| ji[x] - jj[x]))
                        } else {
                            (sc.parts[qj].col(beta), sc.parts[qi].col(alpha), [0, 1, 2].map(|x| jj[x] - ji[x]))
                        };
                        for ((p, l), r) in prod.iter_mut().zip(left).zip(right) {
                            *p = l * r.conj();
                        }
                        sc.cell_domain.forward_inplace(&mut prod);
                        let w = (vol / (sc.energies[a] - sc.energies[b])).sqrt() / vol;
                        let mut s = vec![ZERO; dim];
                        for &(ci, g) in &sc.product_modes {
                            let idx = sc.domain.index_of_freq(sc.supercell_freq(g, d)).expect("products fit");
                            let (c, pos) = self.slot[idx];
                            debug_assert_eq!(c, class);
                            s[pos] += prod[ci] * w;
                        }
                        if alpha == nb - 1 {
                            last.push(s.clone());
                        }
                        cols.push(s);
                    }
                }
            }
        }
        let gram = |cols: &[Vec<C64>]| {
            let mut s = CMat::zeros(dim, cols.len());
            for (j, c) in cols.iter().enumerate() {
                s.col_mut(j).copy_from_slice(c);
            }
            let mut m = CMat::zeros(dim, dim);
            gemm(Op::N, Op::C, ONE, &s, &s, ZERO, &mut m);
            m
        };
        let m = gram(&cols);
        let tail = if self.complete_bands() || cols.is_empty() {
            0.0
        } else {
            gram(&last).frobenius() / m.frobenius().max(f64::MIN_POSITIVE)
        };
        ChiBlock { m, tail }
    }

    fn block(&self, class: usize) -> &ChiBlock {
        self.chi[class].get_or_init(|| self.build_block(class))
    }

    /// Largest band-truncation ratio over the classes built so far.
    pub fn band_tail(&self) -> f64 {
        self.chi.iter().filter_map(|c| c.get()).map(|b| b.tail).fold(0.0, f64::max)
    }

    /// `L nu = -rho_{Q1(nu * |x|^-1)}` from the per-class response blocks.
    pub fn apply_l(&self, nu: &Field) -> Result<Field> {
        let d = &self.sc.domain;
        if !nu.domain.same_as(d) {
            return Err(Error::DomainMismatch);
        }
        let active: Vec<usize> = (0..self.members.len())
            .filter(|&c| self.members[c].iter().any(|&i| i != 0 && nu.coeffs[i] != ZERO))
            .collect();
        let parts: Vec<(usize, Vec<C64>, f64)> = active
            .par_iter()
            .map(|&c| {
                let blk = self.block(c);
                let x: Vec<C64> = self.members[c]
                    .iter()
                    .map(|&i| if i == 0 { ZERO } else { nu.coeffs[i] * (4.0 * PI / d.k2(i)) })
                    .collect();
                (c, blk.m.matvec(&x), blk.tail)
            })
            .collect();
        let mut out = Field::zeros(d, FieldKind::Density);
        let mut tail = 0.0f64;
        for (c, y, t) in parts {
            tail = tail.max(t);
            for (&i, v) in self.members[c].iter().zip(y) {
                out.coeffs[i] = v;
            }
        }
        if tail > self.opts.band_tail_tol {
            return Err(Error::InsufficientBands { ratio: tail });
        }
        Ok(out)
    }

    /// First-order density-matrix response `Q1` on the Galerkin space for a potential.
    pub fn q1_dense(&self, v: &CMat) -> CMat {
        let sc = &self.sc;
        let n = sc.dim();
        CMat::from_fn(n, n, |a, b| {
            if sc.occupied(a) == sc.occupied(b) {
                ZERO
            } else {
                -v[(a, b)] / (sc.energies[a] - sc.energies[b]).abs()
            }
        })
    }

    /// `L nu` through the dense Galerkin potential matrix and the density of `Q1`.
    pub fn apply_l_dense(&self, nu: &Field) -> Result<Field> {
        if !nu.domain.same_as(&self.sc.domain) {
            return Err(Error::DomainMismatch);
        }
        let v = self.sc.potential_matrix(&coulomb_potential(nu));
        let q1 = self.q1_dense(&v);
        Ok(self.sc.density_of(&q1).scaled(-1.0))
    }

    /// Solves `(1 + L) x = nu` by conjugate gradient in the Coulomb inner product.
    pub fn solve_one_plus_l(&self, nu: &Field) -> Result<Field> {
        let mut b = nu.clone();
        b.coeffs[0] = ZERO;
        let bnorm = coulomb_d_unchecked(&b, &b).max(0.0).sqrt();
        let mut x = Field::zeros(&nu.domain, FieldKind::Density);
        if bnorm > 0.0 && self.sc.z() > 0 {
            let mut r = b.clone();
            let mut p = r.clone();
            let mut rr = coulomb_d_unchecked(&r, &r);
            let mut converged = false;
            for _ in 0..self.opts.cg_max_iter {
                let mut ap = self.apply_l(&p)?;
                ap.axpy(1.0, &p);
                let alpha = rr / coulomb_d_unchecked(&p, &ap);
                x.axpy(alpha, &p);
                r.axpy(-alpha, &ap);
                let rr_new = coulomb_d_unchecked(&r, &r);
                if rr_new.max(0.0).sqrt() <= self.opts.cg_tol * bnorm {
                    rr = rr_new;
                    converged = true;
                    break;
                }
                let beta = rr_new / rr;
                rr = rr_new;
                let mut np = r.clone();
                np.axpy(beta, &p);
                p = np;
            }
            if !converged {
                return Err(Error::CgNoConvergence {
                    iterations: self.opts.cg_max_iter,
                    residual: rr.max(0.0).sqrt() / bnorm,
                });
            }
        } else {
            x = b;
        }
        x.coeffs[0] = nu.coeffs[0];
        Ok(x)
    }

    /// `K nu = nu - (1 + L)^{-1} nu`.
    pub fn apply_k(&self, nu: &Field) -> Result<Field> {
        let x = self.solve_one_plus_l(nu)?;
        Ok(nu.sub(&x))
    }

    /// `-D(nu, K nu) / 2`.
    pub fn f_aux(&self, nu: &Field) -> Result<f64> {
        let k = self.apply_k(nu)?;
        Ok(-0.5 * coulomb_d_unchecked(nu, &k))
    }

    /// `B_m nu = m^-1 U_m^* (|x|^-1 * (1 + L)^{-1} U_m nu)` on the macro box of `nu`.
    pub fn apply_b_m(&self, nu: &Field, m: f64) -> Result<Field> {
        let micro = dilate(nu, m, &self.sc.domain)?;
        let x = self.solve_one_plus_l(&micro)?;
        let pot = coulomb_potential(&x);
        Ok(dilate_adjoint(&pot, m, &nu.domain)?.scaled(1.0 / m).with_kind(FieldKind::Potential))
    }

    /// `int B_m(nu) nu`.
    pub fn b_m_self(&self, nu: &Field, m: f64) -> Result<f64> {
        let b = self.apply_b_m(nu, m)?;
        Ok(b.l2_dot(nu).re)
    }

    /// `-1/2 Tr0(Q1 V)` and `Tr(|H0 - eF| Q1^2)` for the potential of `nu`, returning the
    /// relative difference.
    pub fn kinetic_identity_residual(&self, nu: &Field) -> Result<f64> {
        let v = self.sc.potential_matrix(&coulomb_potential(nu));
        let q1 = self.q1_dense(&v);
        let (lhs, rhs) = kinetic_identity_sides(&q1, &v, &self.sc.energies, self.sc.fermi_level);
        if lhs == 0.0 && rhs == 0.0 {
            return Ok(0.0);
        }
        Ok((lhs - rhs).abs() / lhs.abs())
    }
}

/// The two sides `Tr(|H - eF| Q^2)` and `-1/2 Tr(Q V)` for `H` diagonal with entries `h`.
pub fn kinetic_identity_sides(q: &CMat, v: &CMat, h: &[f64], ef: f64) -> (f64, f64) {
    let mut sq = q.clone();
    for j in 0..q.cols {
        for i in 0..q.rows {
            sq[(i, j)] *= (h[i] - ef).abs().sqrt();
        }
    }
    let lhs = sq.frobenius().powi(2);
    let rhs = -0.5 * q.matmul(v).trace().re;
    (lhs, rhs)
}

/// Finite-matrix analog: `Q = 1(A + B < eF) - 1(A < eF)`, returning
/// `|Tr(|A - eF| Q^2) + Tr(Q B)/2| / Tr(|A - eF| Q^2)`.
pub fn matrix_kinetic_identity_residual(a: &CMat, b: &CMat, z: usize) -> Result<f64> {
    let n = a.rows;
    let projector = |h: &CMat| -> Result<(CMat, Vec<f64>, CMat)> {
        let e = eigh(h, n, true)?;
        let v = e.vectors.expect("vectors requested");
        let occ = CMat::from_fn(n, z, |i, j| v[(i, j)]);
        Ok((CMat::mul(&occ, Op::N, &occ, Op::C), e.values, v))
    };
    let (p0, e0, v0) = projector(a)?;
    let mut ab = a.clone();
    ab.add_assign(b, 1.0);
    let (p1, e1, _) = projector(&ab)?;
    if e0[z] - e0[z - 1] <= 0.0 || e1[z] - e1[z - 1] <= 0.0 {
        return Err(Error::NoGap { gap: (e0[z] - e0[z - 1]).min(e1[z] - e1[z - 1]) });
    }
    let ef = 0.5 * (e0[z - 1] + e0[z]);
    let q = p1.sub(&p0);
    // Work in the eigenbasis of A, where |A - eF| is diagonal.
    let qe = CMat::mul(&v0, Op::C, &q.matmul(&v0), Op::N);
    let be = CMat::mul(&v0, Op::C, &b.matmul(&v0), Op::N);
    let (lhs, rhs) = kinetic_identity_sides(&qe, &be, &e0, ef);
    Ok((lhs - rhs).abs() / lhs)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EtaSample {
    pub direction: [i32; 3],
    pub multiple: i32,
    pub k2: f64,
    pub eta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpsFitReport {
    pub samples: Vec<EtaSample>,
    /// `eta` extrapolated to `k = 0` per direction.
    pub eta0: Vec<([i32; 3], f64)>,
    pub relative_residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DielectricMatrix {
    pub eps: Matrix3<f64>,
    pub report: Option<EpsFitReport>,
}

impl DielectricMatrix {
    pub fn identity() -> Self {
        DielectricMatrix { eps: Matrix3::identity(), report: None }
    }

    pub fn isotropic(e: f64) -> Self {
        DielectricMatrix { eps: Matrix3::identity() * e, report: None }
    }

    pub fn eigenvalues(&self) -> [f64; 3] {
        let e = SymmetricEigen::new(self.eps).eigenvalues;
        let mut v = [e[0], e[1], e[2]];
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        (self.eps - Matrix3::identity()).abs().max() <= tol
    }

    pub fn quad(&self, k: &Vector3<f64>) -> f64 {
        k.dot(&(self.eps * k))
    }
}

const EPS_DIRECTIONS: [[i32; 3]; 9] =
    [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, -1, 0], [1, 0, 1], [1, 0, -1], [0, 1, 1], [0, 1, -1]];

/// Head of the inverse dielectric operator `eta(k) = D(nu_k, (1+L)^{-1} nu_k) / D(nu_k, nu_k)`
/// for the mode `nu_k = cos(k.x)`, `k` given in supercell reciprocal coordinates.
pub fn eta(ctx: &ResponseContext, k: [i32; 3]) -> Result<f64> {
    let d = &ctx.sc.domain;
    let mut nu = Field::zeros(d, FieldKind::Density);
    let p = d.index_of_freq(k).ok_or_else(|| Error::Config(format!("mode {k:?} is off the grid")))?;
    let m = d.index_of_freq(k.map(|x| -x)).ok_or_else(|| Error::Config(format!("mode {k:?} is off the grid")))?;
    nu.coeffs[p] = C64::new(0.5, 0.0);
    nu.coeffs[m] = C64::new(0.5, 0.0);
    let x = ctx.solve_one_plus_l(&nu)?;
    Ok(coulomb_d_unchecked(&nu, &x) / coulomb_d_unchecked(&nu, &nu))
}

/// Macroscopic dielectric matrix from the small-`k` behaviour of `eta`.
pub fn extract_eps_m(ctx: &ResponseContext) -> Result<DielectricMatrix> {
    if ctx.sc.n.iter().any(|&n| n < 2) {
        return Err(Error::Config("dielectric extraction needs at least 2 repetitions per axis".into()));
    }
    let lat = &ctx.sc.domain.lattice;
    let samples: Vec<Result<EtaSample>> = EPS_DIRECTIONS
        .par_iter()
        .flat_map_iter(|dir| (1..=2).map(move |t| (*dir, t)))
        .map(|(dir, t)| {
            let k = dir.map(|x| x * t);
            Ok(EtaSample { direction: dir, multiple: t, k2: lat.gcart(k).norm_squared(), eta: eta(ctx, k)? })
        })
        .collect();
    let samples: Vec<EtaSample> = samples.into_iter().collect::<Result<_>>()?;
    if ctx.sc.z() == 0 {
        // No occupied states: L vanishes identically and every eta is 1.
        return Ok(DielectricMatrix {
            eps: Matrix3::identity(),
            report: Some(EpsFitReport {
                eta0: EPS_DIRECTIONS.iter().map(|d| (*d, 1.0)).collect(),
                samples,
                relative_residual: 0.0,
            }),
        });
    }
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    let mut eta0 = Vec::new();
    for dir in EPS_DIRECTIONS {
        let s: Vec<&EtaSample> = samples.iter().filter(|s| s.direction == dir).collect();
        let (a, b) = (s[0], s[1]);
        let e0 = a.eta - (b.eta - a.eta) * a.k2 / (b.k2 - a.k2);
        eta0.push((dir, e0));
        let u = lat.gcart(dir).normalize();
        rows.push([u[0] * u[0], u[1] * u[1], u[2] * u[2], 2.0 * u[0] * u[1], 2.0 * u[0] * u[2], 2.0 * u[1] * u[2]]);
        rhs.push(1.0 / e0);
    }
    let a = DMatrix::from_fn(rows.len(), 6, |i, j| rows[i][j]);
    let b = DVector::from_vec(rhs);
    let svd = a.clone().svd(true, true);
    let x = svd.solve(&b, 1e-14).map_err(|_| Error::FitFailure { residual: f64::NAN })?;
    let relative_residual = (&a * &x - &b).norm() / b.norm();
    if relative_residual > 1e-2 {
        return Err(Error::FitFailure { residual: relative_residual });
    }
    let eps = Matrix3::new(x[0], x[3], x[4], x[3], x[1], x[5], x[4], x[5], x[2]);
    let out = DielectricMatrix { eps, report: Some(EpsFitReport { samples, eta0, relative_residual }) };
    let lo = out.eigenvalues()[0];
    if lo < 1.0 {
        return Err(Error::Invariant(format!("fitted dielectric matrix has eigenvalue {lo} < 1")));
    }
    Ok(out)
}

/// Dielectric potential: `W_hat(k) = 4 pi rho_hat(k) / (k^T eps k)`, `k != 0`.
pub fn w_poisson(rho: &Field, eps: &DielectricMatrix) -> Result<Field> {
    let d = &rho.domain;
    let mut w = Field::zeros(d, FieldKind::Potential);
    for i in 1..d.len() {
        let q = eps.quad(&d.kvec(i));
        if !(q > 0.0) {
            return Err(Error::SingularEps);
        }
        w.coeffs[i] = rho.coeffs[i] * (4.0 * PI / q);
    }
    Ok(w)
}

/// Pekar interaction `2 pi sum |rho_hat|^2 (1/(k^T eps k) - 1/|k|^2)` on the box of `rho`.
pub fn pekar_interaction(rho: &Field, eps: &DielectricMatrix) -> Result<f64> {
    let d = &rho.domain;
    let mut s = 0.0;
    for i in 1..d.len() {
        let k = d.kvec(i);
        let q = eps.quad(&k);
        if !(q > 0.0) {
            return Err(Error::SingularEps);
        }
        s += rho.coeffs[i].norm_sqr() * (1.0 / q - 1.0 / d.k2(i));
    }
    Ok(2.0 * PI * d.volume() * s)
}

/// The same interaction as `1/2 int rho (W_rho - rho * |x|^-1)` on the real-space grid.
pub fn pekar_interaction_real_space(rho: &Field, eps: &DielectricMatrix) -> Result<f64> {
    let w = w_poisson(rho, eps)?.real_values();
    let v = coulomb_potential(rho).real_values();
    let r = rho.real_values();
    let dv = rho.domain.dv();
    Ok(0.5 * r.iter().zip(w.iter().zip(&v)).map(|(a, (b, c))| a * (b - c)).sum::<f64>() * dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{gaussian_density, Domain, Lattice};
    use crate::supercell::tests::reference_crystal;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn opts(n_empty: usize) -> ResponseOptions {
        ResponseOptions { n_empty, cg_tol: 1e-10, cg_max_iter: 100, band_tail_tol: 1.0 }
    }

    fn random_defect(d: &Arc<Domain>, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Field::zeros(d, FieldKind::Density);
        for _ in 0..3 {
            let c = d.lattice.basis * Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let g = gaussian_density(d, c, rng.gen_range(1.5..3.0), rng.gen_range(-0.3..0.3));
            f.axpy(1.0, &g);
        }
        f
    }

    #[test]
    fn block_and_dense_routes_agree() {
        let ctx = ResponseContext::new(reference_crystal(), [2, 2, 1], opts(3)).unwrap();
        let nu = random_defect(&ctx.sc.domain, 1);
        let a = ctx.apply_l(&nu).unwrap();
        let b = ctx.apply_l_dense(&nu).unwrap();
        let scale = a.l2_norm();
        assert!(a.sub(&b).l2_norm() < 1e-10 * scale, "{} vs {}", a.sub(&b).l2_norm(), scale);
        assert!(a.reality_defect() < 1e-12 * scale);
    }

    #[test]
    fn l_is_symmetric_and_nonnegative() {
        let ctx = ResponseContext::new(reference_crystal(), [2, 2, 2], opts(4)).unwrap();
        let mu = random_defect(&ctx.sc.domain, 2);
        let nu = random_defect(&ctx.sc.domain, 3);
        let lm = ctx.apply_l(&mu).unwrap();
        let ln = ctx.apply_l(&nu).unwrap();
        let x = coulomb_d_unchecked(&mu, &ln);
        let y = coulomb_d_unchecked(&lm, &nu);
        assert!((x - y).abs() < 1e-8 * x.abs().max(1e-12));
        assert!(coulomb_d_unchecked(&nu, &ln) >= -1e-10 * coulomb_d_unchecked(&nu, &nu));
        let kn = ctx.apply_k(&nu).unwrap();
        let dk = coulomb_d_unchecked(&nu, &kn);
        assert!(dk >= 0.0 && dk <= coulomb_d_unchecked(&nu, &nu));
        let x = ctx.solve_one_plus_l(&nu).unwrap();
        assert!(kn.add(&x).sub(&nu).l2_norm() < 1e-9 * nu.l2_norm());
        let t = 1.7;
        let f1 = ctx.f_aux(&nu).unwrap();
        let ft = ctx.f_aux(&nu.scaled(t)).unwrap();
        assert!((ft - t * t * f1).abs() < 1e-9 * ft.abs());
    }

    #[test]
    fn kinetic_identity_on_supercell() {
        let ctx = ResponseContext::new(reference_crystal(), [2, 1, 1], opts(4)).unwrap();
        let nu = random_defect(&ctx.sc.domain, 5);
        assert!(ctx.kinetic_identity_residual(&nu).unwrap() < 1e-9);
        let zero = Field::zeros(&ctx.sc.domain, FieldKind::Density);
        assert_eq!(ctx.kinetic_identity_residual(&zero).unwrap(), 0.0);
    }

    #[test]
    fn matrix_analog_residual_is_linear() {
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
        let res: Vec<f64> = [0.02, 0.01, 0.005]
            .iter()
            .map(|t| {
                let mut bt = b.clone();
                bt.scale(C64::new(*t, 0.0));
                matrix_kinetic_identity_residual(&a, &bt, 8).unwrap()
            })
            .collect();
        for w in res.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 1.0).abs() < 0.1, "{res:?}");
        }
    }

    #[test]
    fn pekar_interaction_two_ways() {
        let d = Domain::new(Lattice::cubic(12.0), [24, 24, 24]);
        let rho = gaussian_density(&d, Vector3::new(5.0, 6.0, 7.0), 1.2, 1.0)
            .add(&gaussian_density(&d, Vector3::new(7.0, 5.5, 6.0), 0.9, 0.5));
        let eps = DielectricMatrix { eps: Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0)), report: None };
        let a = pekar_interaction(&rho, &eps).unwrap();
        let b = pekar_interaction_real_space(&rho, &eps).unwrap();
        assert!(a < 0.0);
        assert!((a - b).abs() < 1e-10 * a.abs(), "{a} {b}");
        let iso = pekar_interaction(&rho, &DielectricMatrix::isotropic(3.0)).unwrap();
        let drr = coulomb_d_unchecked(&rho, &rho);
        assert!((iso - 0.5 * (1.0 / 3.0 - 1.0) * drr).abs() < 1e-12 * drr);
        assert_eq!(pekar_interaction(&rho, &DielectricMatrix::identity()).unwrap(), 0.0);
        let w = w_poisson(&rho, &DielectricMatrix::identity()).unwrap();
        assert!(w.sub(&coulomb_potential(&rho)).l2_norm() < 1e-14);
        assert!(matches!(
            pekar_interaction(&rho, &DielectricMatrix { eps: Matrix3::zeros(), report: None }),
            Err(Error::SingularEps)
        ));
    }
}
