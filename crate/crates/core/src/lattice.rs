//! Lattices, plane-wave grids, periodic fields, the periodic Poisson solver and the
//! Coulomb form.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64 as C64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    /// Columns are the lattice vectors.
    pub basis: Matrix3<f64>,
    /// Columns `b_i` with `a_i . b_j = 2 pi delta_ij`.
    pub reciprocal: Matrix3<f64>,
    pub cell_volume: f64,
}

impl Lattice {
    pub fn new(basis: Matrix3<f64>) -> Result<Self> {
        let det = basis.determinant();
        if !(det > 0.0) {
            return Err(Error::Config(format!("lattice basis must have positive determinant, got {det}")));
        }
        let inv = basis.try_inverse().ok_or_else(|| Error::Config("singular lattice".into()))?;
        let reciprocal = inv.transpose() * (2.0 * PI);
        Ok(Lattice { basis, reciprocal, cell_volume: det })
    }

    pub fn cubic(a: f64) -> Self {
        Self::new(Matrix3::identity() * a).expect("cubic lattice with a > 0")
    }

    /// The lattice spanned by `n_i a_i`.
    pub fn repeated(&self, n: [usize; 3]) -> Self {
        let mut b = self.basis;
        for i in 0..3 {
            let s = n[i] as f64;
            b.column_mut(i).scale_mut(s);
        }
        Self::new(b).expect("scaled lattice")
    }

    /// The lattice with every vector multiplied by `s > 0`.
    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.basis * s).expect("scaled lattice")
    }

    pub fn gcart(&self, g: [i32; 3]) -> Vector3<f64> {
        self.reciprocal * Vector3::new(g[0] as f64, g[1] as f64, g[2] as f64)
    }

    pub fn approx_eq(&self, other: &Lattice, tol: f64) -> bool {
        (self.basis - other.basis).abs().max() <= tol * self.basis.abs().max()
    }
}

/// Plane waves `e^{iG.x}` with `|G|^2/2 <= ecut`, in lexicographic order of the integer
/// triples.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlaneWaveBasis {
    pub lattice: Lattice,
    pub ecut: f64,
    pub gvectors: Vec<[i32; 3]>,
    /// Largest index magnitude along each axis.
    pub gmax: [i32; 3],
    /// Cell FFT grid: `4 gmax + 2` points per axis, so products of two basis functions are
    /// represented without aliasing.
    pub grid_dims: [usize; 3],
}

impl PlaneWaveBasis {
    pub fn new(lattice: Lattice, ecut: f64) -> Result<Self> {
        if !(ecut >= 0.0) {
            return Err(Error::EmptyBasis);
        }
        let kmax = (2.0 * ecut).sqrt();
        let mut bound = [0i32; 3];
        for i in 0..3 {
            let len = lattice.basis.column(i).norm();
            bound[i] = (kmax * len / (2.0 * PI)).ceil() as i32 + 1;
        }
        let mut gvectors = Vec::new();
        for a in -bound[0]..=bound[0] {
            for b in -bound[1]..=bound[1] {
                for c in -bound[2]..=bound[2] {
                    let g = [a, b, c];
                    if 0.5 * lattice.gcart(g).norm_squared() <= ecut * (1.0 + 1e-12) {
                        gvectors.push(g);
                    }
                }
            }
        }
        if gvectors.is_empty() {
            return Err(Error::EmptyBasis);
        }
        let mut gmax = [0i32; 3];
        for g in &gvectors {
            for i in 0..3 {
                gmax[i] = gmax[i].max(g[i].abs());
            }
        }
        let grid_dims = [0, 1, 2].map(|i| 4 * gmax[i] as usize + 2);
        Ok(PlaneWaveBasis { lattice, ecut, gvectors, gmax, grid_dims })
    }

    pub fn len(&self) -> usize {
        self.gvectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gvectors.is_empty()
    }

    pub fn cell_domain(&self) -> Arc<Domain> {
        Domain::new(self.lattice.clone(), self.grid_dims)
    }

    /// Domain of the `n`-fold supercell, with the cell grid repeated `n_i` times.
    pub fn supercell_domain(&self, n: [usize; 3]) -> Arc<Domain> {
        let dims = [0, 1, 2].map(|i| self.grid_dims[i] * n[i]);
        Domain::new(self.lattice.repeated(n), dims)
    }
}

/// Gamma-centred Monkhorst-Pack mesh in reduced coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BZMesh {
    pub n: [usize; 3],
    /// Integer labels `j` with `q = j / n` (componentwise, reduced units).
    pub labels: Vec<[i32; 3]>,
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

/// Representative of `j mod n` in `[-floor((n-1)/2), floor(n/2)]`.
pub fn mesh_rep(j: i32, n: usize) -> i32 {
    let n = n as i32;
    let lo = -((n - 1) / 2);
    (j - lo).rem_euclid(n) + lo
}

impl BZMesh {
    pub fn gamma_centered(n: [usize; 3]) -> Self {
        let mut labels = Vec::new();
        let r = |n: usize| -(((n as i32) - 1) / 2)..=(n as i32) / 2;
        for a in r(n[0]) {
            for b in r(n[1]) {
                for c in r(n[2]) {
                    labels.push([a, b, c]);
                }
            }
        }
        let points = labels
            .iter()
            .map(|j| [0, 1, 2].map(|i| j[i] as f64 / n[i] as f64))
            .collect::<Vec<_>>();
        let w = 1.0 / labels.len() as f64;
        BZMesh { n, weights: vec![w; labels.len()], labels, points }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, j: [i32; 3]) -> usize {
        let r = [0, 1, 2].map(|i| mesh_rep(j[i], self.n[i]));
        let lo = [0, 1, 2].map(|i| -(((self.n[i] as i32) - 1) / 2));
        let o = [0, 1, 2].map(|i| (r[i] - lo[i]) as usize);
        (o[0] * self.n[1] + o[1]) * self.n[2] + o[2]
    }
}

/// A periodic box with a real-space FFT grid.
pub struct Domain {
    pub lattice: Lattice,
    pub dims: [usize; 3],
    k2: Vec<f64>,
    plans: [Arc<dyn Fft<f64>>; 3],
    iplans: [Arc<dyn Fft<f64>>; 3],
}

impl std::fmt::Debug for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Domain").field("dims", &self.dims).field("lattice", &self.lattice.basis).finish()
    }
}

/// Signed frequency of FFT index `i` on an axis of `d` points.
pub fn signed_freq(i: usize, d: usize) -> i32 {
    if i <= (d - 1) / 2 {
        i as i32
    } else {
        i as i32 - d as i32
    }
}

impl Domain {
    pub fn new(lattice: Lattice, dims: [usize; 3]) -> Arc<Self> {
        let mut planner = FftPlanner::new();
        let plans = dims.map(|d| planner.plan_fft_forward(d));
        let iplans = dims.map(|d| planner.plan_fft_inverse(d));
        let n = dims[0] * dims[1] * dims[2];
        let mut k2 = vec![0.0; n];
        for (flat, k) in k2.iter_mut().enumerate() {
            let s = Self::unflatten_dims(flat, dims);
            let g = [0, 1, 2].map(|i| signed_freq(s[i], dims[i]));
            *k = lattice.gcart(g).norm_squared();
        }
        Arc::new(Domain { lattice, dims, k2, plans, iplans })
    }

    fn unflatten_dims(flat: usize, d: [usize; 3]) -> [usize; 3] {
        [flat / (d[1] * d[2]), (flat / d[2]) % d[1], flat % d[2]]
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn volume(&self) -> f64 {
        self.lattice.cell_volume
    }

    /// Quadrature weight of one grid point.
    pub fn dv(&self) -> f64 {
        self.volume() / self.len() as f64
    }

    pub fn unflatten(&self, flat: usize) -> [usize; 3] {
        Self::unflatten_dims(flat, self.dims)
    }

    pub fn flatten(&self, s: [usize; 3]) -> usize {
        (s[0] * self.dims[1] + s[1]) * self.dims[2] + s[2]
    }

    /// Signed frequency triple of a flat index.
    pub fn freq(&self, flat: usize) -> [i32; 3] {
        let s = self.unflatten(flat);
        [0, 1, 2].map(|i| signed_freq(s[i], self.dims[i]))
    }

    /// Flat index of a signed frequency triple, if it is on the grid.
    pub fn index_of_freq(&self, g: [i32; 3]) -> Option<usize> {
        let mut s = [0usize; 3];
        for i in 0..3 {
            let d = self.dims[i] as i32;
            let lo = -(d / 2);
            let hi = (d - 1) / 2;
            if g[i] < lo || g[i] > hi {
                return None;
            }
            s[i] = g[i].rem_euclid(d) as usize;
        }
        Some(self.flatten(s))
    }

    /// Flat index of a frequency triple taken modulo the grid.
    pub fn index_of_freq_wrapped(&self, g: [i32; 3]) -> usize {
        let s = [0, 1, 2].map(|i| g[i].rem_euclid(self.dims[i] as i32) as usize);
        self.flatten(s)
    }

    pub fn k2(&self, flat: usize) -> f64 {
        self.k2[flat]
    }

    pub fn kvec(&self, flat: usize) -> Vector3<f64> {
        self.lattice.gcart(self.freq(flat))
    }

    /// Cartesian position of a real-space grid point.
    pub fn position(&self, flat: usize) -> Vector3<f64> {
        let s = self.unflatten(flat);
        let f = Vector3::new(
            s[0] as f64 / self.dims[0] as f64,
            s[1] as f64 / self.dims[1] as f64,
            s[2] as f64 / self.dims[2] as f64,
        );
        self.lattice.basis * f
    }

    pub fn same_as(&self, other: &Domain) -> bool {
        self.dims == other.dims && self.lattice.approx_eq(&other.lattice, 1e-12)
    }

    fn transform(&self, data: &mut [C64], inverse: bool) {
        let d = self.dims;
        assert_eq!(data.len(), self.len());
        let plans = if inverse { &self.iplans } else { &self.plans };
        let mut scratch = vec![C64::new(0.0, 0.0); d.iter().copied().max().unwrap_or(1) * 4];
        // Last axis: contiguous.
        for chunk in data.chunks_exact_mut(d[2]) {
            let need = plans[2].get_inplace_scratch_len();
            if scratch.len() < need {
                scratch.resize(need, C64::new(0.0, 0.0));
            }
            plans[2].process_with_scratch(chunk, &mut scratch[..need]);
        }
        let mut line = vec![C64::new(0.0, 0.0); d[0].max(d[1])];
        // Middle axis.
        for a in 0..d[0] {
            for c in 0..d[2] {
                for b in 0..d[1] {
                    line[b] = data[(a * d[1] + b) * d[2] + c];
                }
                let need = plans[1].get_inplace_scratch_len();
                if scratch.len() < need {
                    scratch.resize(need, C64::new(0.0, 0.0));
                }
                plans[1].process_with_scratch(&mut line[..d[1]], &mut scratch[..need]);
                for b in 0..d[1] {
                    data[(a * d[1] + b) * d[2] + c] = line[b];
                }
            }
        }
        // First axis.
        for b in 0..d[1] {
            for c in 0..d[2] {
                for a in 0..d[0] {
                    line[a] = data[(a * d[1] + b) * d[2] + c];
                }
                let need = plans[0].get_inplace_scratch_len();
                if scratch.len() < need {
                    scratch.resize(need, C64::new(0.0, 0.0));
                }
                plans[0].process_with_scratch(&mut line[..d[0]], &mut scratch[..need]);
                for a in 0..d[0] {
                    data[(a * d[1] + b) * d[2] + c] = line[a];
                }
            }
        }
    }

    /// Grid values to coefficients of `f(x) = sum_K c_K e^{iK.x}`.
    pub fn forward(&self, values: &[C64]) -> Vec<C64> {
        let mut c = values.to_vec();
        self.transform(&mut c, false);
        let s = 1.0 / self.len() as f64;
        for z in &mut c {
            *z *= s;
        }
        c
    }

    /// Coefficients to grid values.
    pub fn inverse(&self, coeffs: &[C64]) -> Vec<C64> {
        let mut v = coeffs.to_vec();
        self.transform(&mut v, true);
        v
    }

    pub fn forward_inplace(&self, data: &mut [C64]) {
        self.transform(data, false);
        let s = 1.0 / self.len() as f64;
        for z in data.iter_mut() {
            *z *= s;
        }
    }

    pub fn inverse_inplace(&self, data: &mut [C64]) {
        self.transform(data, true);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    Density,
    Potential,
    WavefunctionWeight,
}

/// A periodic function stored by its Fourier coefficients on a domain's full FFT grid.
#[derive(Clone, Debug)]
pub struct Field {
    pub domain: Arc<Domain>,
    pub coeffs: Vec<C64>,
    pub kind: FieldKind,
}

impl Field {
    pub fn zeros(domain: &Arc<Domain>, kind: FieldKind) -> Self {
        Field { domain: domain.clone(), coeffs: vec![C64::new(0.0, 0.0); domain.len()], kind }
    }

    pub fn from_coeffs(domain: &Arc<Domain>, coeffs: Vec<C64>, kind: FieldKind) -> Self {
        assert_eq!(coeffs.len(), domain.len());
        Field { domain: domain.clone(), coeffs, kind }
    }

    pub fn from_values(domain: &Arc<Domain>, values: &[C64], kind: FieldKind) -> Self {
        Field { domain: domain.clone(), coeffs: domain.forward(values), kind }
    }

    pub fn from_real_values(domain: &Arc<Domain>, values: &[f64], kind: FieldKind) -> Self {
        let v: Vec<C64> = values.iter().map(|&x| C64::new(x, 0.0)).collect();
        Self::from_values(domain, &v, kind)
    }

    /// Real field from a function of position.
    pub fn from_fn(domain: &Arc<Domain>, kind: FieldKind, f: impl Fn(Vector3<f64>) -> f64) -> Self {
        let v: Vec<f64> = (0..domain.len()).map(|i| f(domain.position(i))).collect();
        Self::from_real_values(domain, &v, kind)
    }

    pub fn values(&self) -> Vec<C64> {
        self.domain.inverse(&self.coeffs)
    }

    pub fn real_values(&self) -> Vec<f64> {
        self.values().into_iter().map(|z| z.re).collect()
    }

    pub fn mean(&self) -> C64 {
        self.coeffs[0]
    }

    pub fn integral(&self) -> f64 {
        self.coeffs[0].re * self.domain.volume()
    }

    pub fn with_kind(mut self, kind: FieldKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for z in &mut out.coeffs {
            *z *= s;
        }
        out
    }

    pub fn axpy(&mut self, a: f64, x: &Field) {
        assert!(self.domain.same_as(&x.domain));
        for (y, xv) in self.coeffs.iter_mut().zip(&x.coeffs) {
            *y += xv * a;
        }
    }

    pub fn add(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// `int conj(f) g` over the box.
    pub fn l2_dot(&self, other: &Field) -> C64 {
        let s: C64 = self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a.conj() * b).sum();
        s * self.domain.volume()
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_dot(self).re.max(0.0).sqrt()
    }

    /// Largest violation of `c(-K) = conj(c(K))`.
    pub fn reality_defect(&self) -> f64 {
        let d = &self.domain;
        let mut worst = 0.0f64;
        for (i, c) in self.coeffs.iter().enumerate() {
            let g = d.freq(i);
            let j = d.index_of_freq_wrapped([-g[0], -g[1], -g[2]]);
            worst = worst.max((self.coeffs[j] - c.conj()).norm());
        }
        worst
    }

    /// Project onto real fields.
    pub fn realified(&self) -> Field {
        let d = &self.domain;
        let mut out = self.clone();
        for i in 0..d.len() {
            let g = d.freq(i);
            let j = d.index_of_freq_wrapped([-g[0], -g[1], -g[2]]);
            out.coeffs[i] = 0.5 * (self.coeffs[i] + self.coeffs[j].conj());
        }
        out
    }

    /// Translate by a Cartesian vector: `f(x - tau)`.
    pub fn translated(&self, tau: Vector3<f64>) -> Field {
        let mut out = self.clone();
        for (i, c) in out.coeffs.iter_mut().enumerate() {
            let k = self.domain.kvec(i);
            *c *= C64::from_polar(1.0, -k.dot(&tau));
        }
        out
    }
}

/// Periodic Poisson solve `-Delta V = 4 pi s` with the zero-mean convention.
pub fn poisson_periodic(source: &Field, basis: &PlaneWaveBasis) -> Result<Field> {
    if basis.is_empty() {
        return Err(Error::EmptyBasis);
    }
    let mean = source.mean().norm();
    if mean > 1e-10 {
        return Err(Error::NonNeutralSource { mean });
    }
    Ok(coulomb_potential(source))
}

/// `f * |x|^{-1}` on the torus, dropping the `K = 0` mode.
pub fn coulomb_potential(f: &Field) -> Field {
    let d = &f.domain;
    let mut out = Field::zeros(d, FieldKind::Potential);
    for i in 1..d.len() {
        out.coeffs[i] = f.coeffs[i] * (4.0 * PI / d.k2(i));
    }
    out
}

/// Coulomb form `D(f,g) = 4 pi |Omega| sum_{K != 0} conj(f_K) g_K / |K|^2`.
pub fn coulomb_d(f: &Field, g: &Field) -> Result<f64> {
    if !f.domain.same_as(&g.domain) {
        return Err(Error::DomainMismatch);
    }
    Ok(coulomb_d_unchecked(f, g))
}

pub(crate) fn coulomb_d_unchecked(f: &Field, g: &Field) -> f64 {
    let d = &f.domain;
    let mut s = 0.0;
    for i in 1..d.len() {
        s += (f.coeffs[i].conj() * g.coeffs[i]).re / d.k2(i);
    }
    4.0 * PI * d.volume() * s
}

pub fn laplacian(f: &Field) -> Field {
    let d = &f.domain;
    let mut out = f.clone();
    for (i, c) in out.coeffs.iter_mut().enumerate() {
        *c *= -d.k2(i);
    }
    out
}

/// Copy Fourier coefficients index-for-index onto a box scaled by `1/m`, multiplying by
/// `factor`. Returns the copied field and the relative L2 mass that did not fit.
fn rescale_coeffs(f: &Field, target: &Arc<Domain>, factor: f64, kind: FieldKind) -> (Field, f64) {
    let src = &f.domain;
    let mut out = Field::zeros(target, kind);
    let mut total = 0.0;
    let mut lost = 0.0;
    for (i, c) in f.coeffs.iter().enumerate() {
        let w = c.norm_sqr();
        total += w;
        let g = src.freq(i);
        // An even source axis stores its Nyquist mode once; split it symmetrically when the
        // target has room for both signs.
        let mut variants: Vec<([i32; 3], f64)> = vec![(g, 1.0)];
        for ax in 0..3 {
            let d = src.dims[ax] as i32;
            if d % 2 == 0 && g[ax] == -(d / 2) && target.dims[ax] > src.dims[ax] {
                let mut next = Vec::with_capacity(variants.len() * 2);
                for (v, s) in &variants {
                    let mut p = *v;
                    p[ax] = -p[ax];
                    next.push((*v, s * 0.5));
                    next.push((p, s * 0.5));
                }
                variants = next;
            }
        }
        let mut placed = 0.0;
        for (v, s) in variants {
            let fits = (0..3).all(|ax| {
                let d = target.dims[ax] as i32;
                if target.dims[ax] < src.dims[ax] {
                    // Truncation keeps only modes strictly inside the target band.
                    v[ax].abs() < (d + 1) / 2 && !(d % 2 == 0 && v[ax].abs() == d / 2)
                } else {
                    v[ax] >= -(d / 2) && v[ax] <= (d - 1) / 2
                }
            });
            if fits {
                if let Some(j) = target.index_of_freq(v) {
                    out.coeffs[j] += c * (s * factor);
                    placed += s;
                }
            }
        }
        lost += w * (1.0 - placed).max(0.0);
    }
    let ratio = if total > 0.0 { lost / total } else { 0.0 };
    (out, ratio)
}

fn check_scaled_box(from: &Lattice, to: &Lattice, m: f64) -> Result<()> {
    let expect = from.scaled(1.0 / m);
    if !expect.approx_eq(to, 1e-10) {
        return Err(Error::IncommensurateGrids(format!(
            "target box is not the source box scaled by 1/m = {}",
            1.0 / m
        )));
    }
    Ok(())
}

/// Dilation `(U_m nu)(x) = m^3 nu(m x)` from a box to the box scaled by `1/m`.
pub fn dilate(nu: &Field, m: f64, target: &Arc<Domain>) -> Result<Field> {
    if !(m > 0.0 && m <= 1.0) {
        return Err(Error::Config(format!("dilation parameter {m} not in (0,1]")));
    }
    check_scaled_box(&nu.domain.lattice, &target.lattice, m)?;
    let (out, tail) = rescale_coeffs(nu, target, m * m * m, FieldKind::Density);
    if tail > 1e-6 {
        return Err(Error::ResolutionLoss { tail });
    }
    Ok(out)
}

/// Adjoint of the dilation on functions: `(U_m^* f)(y) = f(y / m)`, mapping from the box
/// scaled by `1/m` back to `target`.
pub fn dilate_adjoint(f: &Field, m: f64, target: &Arc<Domain>) -> Result<Field> {
    check_scaled_box(&target.lattice, &f.domain.lattice, m)?;
    let (out, tail) = rescale_coeffs(f, target, 1.0, f.kind);
    if tail > 1e-6 {
        return Err(Error::ResolutionLoss { tail });
    }
    Ok(out)
}

/// Periodized normalized Gaussian of width `sigma` and charge `charge` centred at `center`,
/// built in Fourier space.
pub fn gaussian_density(domain: &Arc<Domain>, center: Vector3<f64>, sigma: f64, charge: f64) -> Field {
    let mut f = Field::zeros(domain, FieldKind::Density);
    let vol = domain.volume();
    for i in 0..domain.len() {
        let k = domain.kvec(i);
        let g = domain.freq(i);
        // Even-grid Nyquist modes lack their partner; drop them to keep the field real.
        let nyq = (0..3).any(|ax| domain.dims[ax] % 2 == 0 && g[ax] == -(domain.dims[ax] as i32 / 2));
        if nyq {
            continue;
        }
        f.coeffs[i] = C64::from_polar(charge / vol * (-0.5 * sigma * sigma * k.norm_squared()).exp(), -k.dot(&center));
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_real(domain: &Arc<Domain>, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..domain.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Field::from_real_values(domain, &v, FieldKind::Density)
    }

    #[test]
    fn reciprocal_duality() {
        let l = Lattice::new(Matrix3::new(2.0, 0.3, 0.1, 0.0, 1.7, 0.2, 0.0, 0.0, 1.5)).unwrap();
        let p = l.reciprocal.transpose() * l.basis;
        assert!((p - Matrix3::identity() * (2.0 * PI)).abs().max() < 1e-12);
        assert!((l.cell_volume - l.basis.determinant()).abs() < 1e-14);
    }

    #[test]
    fn negative_orientation_rejected() {
        let b = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Lattice::new(b).is_err());
    }

    #[test]
    fn basis_is_lexicographic_and_symmetric() {
        let pw = PlaneWaveBasis::new(Lattice::cubic(10.0), 0.6).unwrap();
        assert_eq!(pw.len(), 27);
        assert!(pw.gvectors.windows(2).all(|w| w[0] < w[1]));
        for g in &pw.gvectors {
            assert!(pw.gvectors.contains(&[-g[0], -g[1], -g[2]]));
        }
        assert_eq!(pw.grid_dims, [6, 6, 6]);
    }

    #[test]
    fn mesh_weights_and_inversion_closure() {
        for n in [1usize, 2, 3, 4, 5] {
            let m = BZMesh::gamma_centered([n, n, n]);
            let s: f64 = m.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
            for j in &m.labels {
                let k = m.index_of([-j[0], -j[1], -j[2]]);
                assert!(k < m.len());
                assert_eq!(m.index_of(*j), m.labels.iter().position(|x| x == j).unwrap());
            }
        }
    }

    #[test]
    fn parseval() {
        let d = Domain::new(Lattice::cubic(3.0), [6, 5, 4]);
        let f = random_real(&d, 1);
        let g = random_real(&d, 2);
        let real: f64 = f.real_values().iter().zip(g.real_values()).map(|(a, b)| a * b).sum::<f64>() * d.dv();
        assert!((real - f.l2_dot(&g).re).abs() < 1e-12 * real.abs().max(1.0));
        assert!(f.reality_defect() < 1e-14);
    }

    #[test]
    fn poisson_single_mode() {
        let pw = PlaneWaveBasis::new(Lattice::cubic(1.0), 30.0).unwrap();
        let d = pw.cell_domain();
        let c = 0.7;
        let src = Field::from_fn(&d, FieldKind::Density, |x| c * (2.0 * PI * x[0]).cos());
        let v = poisson_periodic(&src, &pw).unwrap();
        let want = Field::from_fn(&d, FieldKind::Potential, |x| c / PI * (2.0 * PI * x[0]).cos());
        let err = v.sub(&want).l2_norm();
        assert!(err < 1e-13, "{err}");
        let zero = poisson_periodic(&Field::zeros(&d, FieldKind::Density), &pw).unwrap();
        assert!(zero.coeffs.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn poisson_inverts_laplacian() {
        let pw = PlaneWaveBasis::new(Lattice::cubic(2.0), 8.0).unwrap();
        let d = pw.cell_domain();
        let mut f = random_real(&d, 7);
        f.coeffs[0] = C64::new(0.0, 0.0);
        let lap = laplacian(&f).scaled(-1.0 / (4.0 * PI));
        let back = poisson_periodic(&lap, &pw).unwrap();
        assert!(back.sub(&f).l2_norm() < 1e-12 * f.l2_norm());
    }

    #[test]
    fn non_neutral_rejected() {
        let pw = PlaneWaveBasis::new(Lattice::cubic(2.0), 2.0).unwrap();
        let d = pw.cell_domain();
        let f = Field::from_fn(&d, FieldKind::Density, |_| 1.0);
        assert!(matches!(poisson_periodic(&f, &pw), Err(Error::NonNeutralSource { .. })));
        assert!(matches!(PlaneWaveBasis::new(Lattice::cubic(2.0), -1.0), Err(Error::EmptyBasis)));
    }

    #[test]
    fn coulomb_gaussian_self_energy() {
        let l = 40.0;
        let d = Domain::new(Lattice::cubic(l), [64, 64, 64]);
        let sigma = 1.0;
        let f = gaussian_density(&d, Vector3::new(20.0, 20.0, 20.0), sigma, 1.0);
        let dd = coulomb_d(&f, &f).unwrap();
        // Ewald: jellium Madelung term -2.837297/L plus the finite-width background term.
        let want = 1.0 / (sigma * PI.sqrt()) - 2.837297479 / l + 4.0 * PI * sigma * sigma / l.powi(3);
        assert!((dd - want).abs() < 1e-6, "{dd} {want}");
    }

    #[test]
    fn coulomb_domain_mismatch() {
        let a = Domain::new(Lattice::cubic(2.0), [4, 4, 4]);
        let b = Domain::new(Lattice::cubic(3.0), [4, 4, 4]);
        let f = Field::zeros(&a, FieldKind::Density);
        let g = Field::zeros(&b, FieldKind::Density);
        assert!(matches!(coulomb_d(&f, &g), Err(Error::DomainMismatch)));
    }

    #[test]
    fn dilation_scaling() {
        let d = Domain::new(Lattice::cubic(10.0), [24, 24, 24]);
        let nu = gaussian_density(&d, Vector3::new(5.0, 5.0, 5.0), 0.9, 1.0);
        let big = Domain::new(Lattice::cubic(40.0), [24, 24, 24]);
        let dn = dilate(&nu, 0.25, &big).unwrap();
        assert!((dn.integral() - 1.0).abs() < 1e-12);
        let r = coulomb_d(&dn, &dn).unwrap() / coulomb_d(&nu, &nu).unwrap();
        assert!((r - 0.25).abs() < 1e-6);
        let direct = gaussian_density(&big, Vector3::new(20.0, 20.0, 20.0), 3.6, 1.0);
        assert!(dn.sub(&direct).l2_norm() < 1e-10);
        let same = dilate(&nu, 1.0, &d).unwrap();
        assert!(same.sub(&nu).l2_norm() < 1e-15);
    }

    #[test]
    fn dilation_resolution_loss() {
        let d = Domain::new(Lattice::cubic(10.0), [24, 24, 24]);
        let nu = gaussian_density(&d, Vector3::new(5.0, 5.0, 5.0), 0.3, 1.0);
        let coarse = Domain::new(Lattice::cubic(20.0), [6, 6, 6]);
        assert!(matches!(dilate(&nu, 0.5, &coarse), Err(Error::ResolutionLoss { .. })));
    }
}
