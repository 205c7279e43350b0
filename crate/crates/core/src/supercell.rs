//! Galerkin space of the `n`-fold supercell spanned by the lowest Bloch bands at the
//! supercell-commensurate wavevectors, with densities and potential matrices of operators.

use std::sync::Arc;

use nalgebra::Vector3;
use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::crystal::{bloch_bands, periodic_parts, BlochEigensystem, CrystalGroundState};
use crate::error::{Error, Result};
use crate::lattice::{BZMesh, Domain, Field, FieldKind};
use crate::linalg::{eigh, gemm, CMat, Op};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

/// Supercell representation of the unperturbed crystal.
///
/// State `a = q * n_bands + band` is `e^{i q.x} u_{band,q}(x) / sqrt(|supercell|)`.
#[derive(Debug)]
pub struct Supercell {
    pub crystal: Arc<CrystalGroundState>,
    pub n: [usize; 3],
    pub mesh: BZMesh,
    pub bloch: BlochEigensystem,
    pub cell_domain: Arc<Domain>,
    pub domain: Arc<Domain>,
    pub n_bands: usize,
    /// `u_{band,q}` on the cell grid, one column per band.
    pub parts: Vec<CMat>,
    pub energies: Vec<f64>,
    pub fermi_level: f64,
    /// Cell-grid indices and frequencies of every product `u_a conj(u_b)` mode.
    pub product_modes: Vec<(usize, [i32; 3])>,
}

impl Supercell {
    pub fn new(crystal: Arc<CrystalGroundState>, n: [usize; 3], n_bands: usize) -> Result<Self> {
        if n.iter().any(|&x| x == 0) {
            return Err(Error::Config("supercell repetitions must be positive".into()));
        }
        let basis = &crystal.basis;
        let z = crystal.z;
        if n_bands < z + 1 || n_bands > basis.len() {
            return Err(Error::Config(format!(
                "n_bands = {n_bands} must lie in [{}, {}]",
                z + 1,
                basis.len()
            )));
        }
        let mesh = BZMesh::gamma_centered(n);
        let bloch = bloch_bands(basis, &crystal.v0, &mesh, n_bands)?;
        let ef = crystal.fermi_level;
        if z > 0 {
            let top = bloch.eigenvalues.iter().map(|e| e[z - 1]).fold(f64::NEG_INFINITY, f64::max);
            let bottom = bloch.eigenvalues.iter().map(|e| e[z]).fold(f64::INFINITY, f64::min);
            if !(top < ef && ef < bottom) {
                return Err(Error::NoGap { gap: (bottom - ef).min(ef - top) });
            }
        }
        let cell_domain = crystal.domain.clone();
        let domain = basis.supercell_domain(n);
        let parts: Vec<CMat> = bloch.vectors.iter().map(|c| periodic_parts(basis, &cell_domain, c, n_bands)).collect();
        let energies = bloch.eigenvalues.iter().flat_map(|e| e.iter().cloned()).collect();
        let gm = basis.gmax;
        let product_modes = (0..cell_domain.len())
            .filter_map(|i| {
                let g = cell_domain.freq(i);
                ((0..3).all(|a| g[a].abs() <= 2 * gm[a])).then_some((i, g))
            })
            .collect();
        Ok(Supercell {
            crystal,
            n,
            mesh,
            bloch,
            cell_domain,
            domain,
            n_bands,
            parts,
            energies,
            fermi_level: ef,
            product_modes,
        })
    }

    pub fn dim(&self) -> usize {
        self.mesh.len() * self.n_bands
    }

    pub fn z(&self) -> usize {
        self.crystal.z
    }

    pub fn occupied(&self, a: usize) -> bool {
        self.energies[a] < self.fermi_level
    }

    pub fn label(&self, q: usize) -> [i32; 3] {
        self.mesh.labels[q]
    }

    /// Mesh index of the label `j` if it lies in the label range (no folding).
    pub fn exact_index(&self, j: [i32; 3]) -> Option<usize> {
        for a in 0..3 {
            let n = self.n[a] as i32;
            if j[a] < -((n - 1) / 2) || j[a] > n / 2 {
                return None;
            }
        }
        Some(self.mesh.index_of(j))
    }

    /// All label differences `j_a - j_b`.
    pub fn differences(&self) -> Vec<[i32; 3]> {
        let r = |a: usize| -(self.n[a] as i32 - 1)..=(self.n[a] as i32 - 1);
        let mut out = Vec::new();
        for x in r(0) {
            for y in r(1) {
                for z in r(2) {
                    out.push([x, y, z]);
                }
            }
        }
        out
    }

    /// Pairs `(qa, qb)` with `j_a - j_b = d`.
    pub fn pairs_with_difference(&self, d: [i32; 3]) -> Vec<(usize, usize)> {
        (0..self.mesh.len())
            .filter_map(|qa| {
                let ja = self.label(qa);
                self.exact_index([ja[0] - d[0], ja[1] - d[1], ja[2] - d[2]]).map(|qb| (qa, qb))
            })
            .collect()
    }

    /// Supercell frequency `n G + d`.
    pub fn supercell_freq(&self, g: [i32; 3], d: [i32; 3]) -> [i32; 3] {
        [0, 1, 2].map(|a| self.n[a] as i32 * g[a] + d[a])
    }

    /// Adds `(1/|supercell|) FFT(prod)` of a cell-grid product with label difference `d`
    /// into supercell coefficients.
    fn scatter_product(&self, prod: &mut [C64], d: [i32; 3], out: &mut [C64]) {
        self.cell_domain.forward_inplace(prod);
        let inv = 1.0 / self.domain.volume();
        for &(i, g) in &self.product_modes {
            let k = self.supercell_freq(g, d);
            let idx = self.domain.index_of_freq(k).expect("products fit the supercell grid");
            out[idx] += prod[i] * inv;
        }
    }

    fn block(q: &CMat, nb: usize, qa: usize, qb: usize) -> CMat {
        CMat::from_fn(nb, nb, |i, j| q[(qa * nb + i, qb * nb + j)])
    }

    /// Density `rho_Q(x) = sum_ab Q_ab psi_a(x) conj(psi_b(x))` of an operator on the
    /// Galerkin space.
    pub fn density_of(&self, q: &CMat) -> Field {
        assert_eq!((q.rows, q.cols), (self.dim(), self.dim()));
        let nb = self.n_bands;
        let nc = self.cell_domain.len();
        let diffs = self.differences();
        let partial: Vec<Vec<C64>> = diffs
            .par_iter()
            .map(|&d| {
                let mut out = vec![ZERO; self.domain.len()];
                let mut acc = vec![ZERO; nc];
                let mut any = false;
                for (qa, qb) in self.pairs_with_difference(d) {
                    let blk = Self::block(q, nb, qa, qb);
                    if blk.data.iter().all(|z| *z == ZERO) {
                        continue;
                    }
                    any = true;
                    let m = self.parts[qa].matmul(&blk);
                    let ub = &self.parts[qb];
                    for beta in 0..nb {
                        for ((a, x), y) in acc.iter_mut().zip(m.col(beta)).zip(ub.col(beta)) {
                            *a += x * y.conj();
                        }
                    }
                }
                if any {
                    self.scatter_product(&mut acc, d, &mut out);
                }
                out
            })
            .collect();
        let mut coeffs = vec![ZERO; self.domain.len()];
        for p in &partial {
            for (c, x) in coeffs.iter_mut().zip(p) {
                *c += x;
            }
        }
        Field::from_coeffs(&self.domain, coeffs, FieldKind::Density)
    }

    /// Matrix `<psi_a | W | psi_b>` of a supercell potential.
    pub fn potential_matrix(&self, w: &Field) -> CMat {
        assert!(w.domain.same_as(&self.domain), "potential must live on the supercell");
        let nb = self.n_bands;
        let nc = self.cell_domain.len();
        let diffs = self.differences();
        let blocks: Vec<Vec<(usize, usize, CMat)>> = diffs
            .par_iter()
            .map(|&d| {
                let mut y = vec![ZERO; nc];
                for &(i, g) in &self.product_modes {
                    let k = self.supercell_freq(g, d);
                    let idx = self.domain.index_of_freq(k).expect("products fit the supercell grid");
                    y[i] = w.coeffs[idx];
                }
                if y.iter().all(|z| *z == ZERO) {
                    return vec![];
                }
                self.cell_domain.inverse_inplace(&mut y);
                let scale = 1.0 / nc as f64;
                self.pairs_with_difference(d)
                    .into_iter()
                    .map(|(qa, qb)| {
                        let mut yb = self.parts[qb].clone();
                        for j in 0..nb {
                            for (z, s) in yb.col_mut(j).iter_mut().zip(&y) {
                                *z *= s * scale;
                            }
                        }
                        (qa, qb, CMat::mul(&self.parts[qa], Op::C, &yb, Op::N))
                    })
                    .collect()
            })
            .collect();
        let mut out = CMat::zeros(self.dim(), self.dim());
        for list in blocks {
            for (qa, qb, blk) in list {
                for j in 0..nb {
                    for i in 0..nb {
                        out[(qa * nb + i, qb * nb + j)] = blk[(i, j)];
                    }
                }
            }
        }
        out
    }

    /// Per-wavevector blocks of `-Delta` on the Galerkin space.
    pub fn laplacian_blocks(&self) -> Vec<CMat> {
        let lat = &self.crystal.basis.lattice;
        self.bloch
            .vectors
            .iter()
            .zip(&self.mesh.points)
            .map(|(c, q)| {
                let qc = lat.reciprocal * Vector3::from(*q);
                let mut tc = c.clone();
                for (row, g) in self.crystal.basis.gvectors.iter().enumerate() {
                    let k2 = (lat.gcart(*g) + qc).norm_squared();
                    for j in 0..c.cols {
                        tc[(row, j)] *= k2;
                    }
                }
                CMat::mul(c, Op::C, &tc, Op::N)
            })
            .collect()
    }

    /// Dense `|grad|` on the Galerkin space (block diagonal in the wavevector).
    pub fn abs_grad(&self) -> Result<CMat> {
        let nb = self.n_bands;
        let mut out = CMat::zeros(self.dim(), self.dim());
        for (q, t) in self.laplacian_blocks().into_iter().enumerate() {
            let e = eigh(&t, nb, true)?;
            let v = e.vectors.expect("vectors requested");
            let s: Vec<f64> = e.values.iter().map(|x| x.max(0.0).sqrt()).collect();
            let mut vs = v.clone();
            for j in 0..nb {
                for z in vs.col_mut(j) {
                    *z *= s[j];
                }
            }
            let r = CMat::mul(&vs, Op::N, &v, Op::C);
            for j in 0..nb {
                for i in 0..nb {
                    out[(q * nb + i, q * nb + j)] = r[(i, j)];
                }
            }
        }
        Ok(out)
    }

    /// Diagonal of `H0` on the Galerkin space.
    pub fn h0_diag(&self) -> &[f64] {
        &self.energies
    }

    /// Projector onto the occupied states, diagonal in the Galerkin basis.
    pub fn gamma0(&self) -> CMat {
        let d: Vec<f64> = (0..self.dim()).map(|a| if self.occupied(a) { 1.0 } else { 0.0 }).collect();
        CMat::diag(&d)
    }
}

/// `a^H diag(w) b` over the rows, for column blocks on a common grid.
pub fn weighted_inner(a: &CMat, w: &[C64], b: &CMat) -> CMat {
    let mut wb = b.clone();
    for j in 0..b.cols {
        for (z, s) in wb.col_mut(j).iter_mut().zip(w) {
            *z *= s;
        }
    }
    let mut out = CMat::zeros(a.cols, b.cols);
    gemm(Op::C, Op::N, ONE, a, &wb, ZERO, &mut out);
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::crystal::{nuclear_density, scf_crystal, ScfOptions, Site};
    use crate::lattice::{gaussian_density, Lattice, PlaneWaveBasis};
    use crate::linalg::dot;
    use std::sync::OnceLock;

    pub fn reference_crystal() -> Arc<CrystalGroundState> {
        static GS: OnceLock<Arc<CrystalGroundState>> = OnceLock::new();
        GS.get_or_init(|| {
            let basis = PlaneWaveBasis::new(Lattice::cubic(10.0), 0.6).unwrap();
            let domain = basis.cell_domain();
            let sites = [Site { position: [0.0; 3], charge: 1.0 }];
            let mu = nuclear_density(&basis, &domain, &sites, 0.3);
            let mesh = BZMesh::gamma_centered([4, 4, 4]);
            let opts = ScfOptions { n_bands: 5, mix: 0.5, tol: 1e-11, max_iter: 300 };
            Arc::new(scf_crystal(&mu, &basis, &mesh, 1, &opts).unwrap())
        })
        .clone()
    }

    #[test]
    fn identity_density_is_electron_count() {
        let sc = Supercell::new(reference_crystal(), [2, 2, 2], 3).unwrap();
        let rho = sc.density_of(&CMat::identity(sc.dim()));
        assert!((rho.integral() - sc.dim() as f64).abs() < 1e-10);
        let occ = sc.density_of(&sc.gamma0());
        assert!((occ.integral() - 8.0).abs() < 1e-10);
        // The occupied density of the supercell is the crystal density on a 2^3 mesh.
        let v = occ.real_values();
        assert!(v.iter().all(|x| *x > -1e-10));
    }

    #[test]
    fn potential_matrix_matches_density_pairing() {
        // <a|W|b> = int W conj(... ) must equal the L2 pairing of W with rho of |b><a|.
        let sc = Supercell::new(reference_crystal(), [2, 1, 1], 2).unwrap();
        let w = gaussian_density(&sc.domain, Vector3::new(3.0, 1.0, 2.0), 2.0, 1.0).with_kind(FieldKind::Potential);
        let wm = sc.potential_matrix(&w);
        assert!(wm.hermitian_defect() < 1e-13);
        for (a, b) in [(0, 0), (0, 3), (1, 2), (3, 1)] {
            let mut e = CMat::zeros(sc.dim(), sc.dim());
            e[(b, a)] = ONE;
            let rho = sc.density_of(&e);
            let direct = dot(&rho.coeffs, &w.coeffs) * sc.domain.volume();
            assert!((direct.conj() - wm[(a, b)]).norm() < 1e-12, "{a} {b}");
        }
    }

    #[test]
    fn orthonormal_galerkin_states() {
        let sc = Supercell::new(reference_crystal(), [2, 2, 1], 3).unwrap();
        let mut one = Field::zeros(&sc.domain, FieldKind::Potential);
        one.coeffs[0] = ONE;
        let s = sc.potential_matrix(&one);
        assert!(s.sub(&CMat::identity(sc.dim())).frobenius() < 1e-10);
    }

    #[test]
    fn abs_grad_squares_to_laplacian() {
        let sc = Supercell::new(reference_crystal(), [2, 1, 1], 4).unwrap();
        let g = sc.abs_grad().unwrap();
        let g2 = g.matmul(&g);
        let blocks = sc.laplacian_blocks();
        let nb = sc.n_bands;
        for (q, t) in blocks.iter().enumerate() {
            let b = Supercell::block(&g2, nb, q, q);
            assert!(b.sub(t).frobenius() < 1e-12);
        }
    }
}
