//! Pekar's continuum polaron with an anisotropic dielectric matrix: ground state on a periodic
//! box by a projected gradient flow, and energies of many-body trial states.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Domain, Field, FieldKind};
use crate::response::DielectricMatrix;
use crate::C64;

/// Interaction kernel on the box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PekarKernel {
    /// Torus Coulomb, `K = 0` mode dropped.
    Periodic,
    /// Bare Coulomb cut off at `|x| = radius` and screened Coulomb cut off on the ellipsoid
    /// `|eps^{-1/2} x| = radius / sqrt(lambda_min)`. Exact for densities whose support has
    /// diameter below `radius`, provided the box side is at least `radius (1 + sqrt(cond eps))`.
    Truncated { radius: f64 },
}

fn cutoff_kernel(radius: f64, q: f64) -> f64 {
    if q == 0.0 {
        2.0 * PI * radius * radius
    } else {
        4.0 * PI * (1.0 - (radius * q.sqrt()).cos()) / q
    }
}

impl PekarKernel {
    /// Truncated kernel with the largest radius keeping images of `eps`-screened pairs apart.
    pub fn truncated_for(domain: &Domain, eps: &DielectricMatrix) -> Self {
        let side = (0..3).map(|i| domain.lattice.basis.column(i).norm()).fold(f64::INFINITY, f64::min);
        let ev = eps.eigenvalues();
        let cond = ev[2] / ev[0];
        PekarKernel::Truncated { radius: side / (1.0 + cond.sqrt()) }
    }

    /// Fourier value of the bare Coulomb kernel at `|k|^2`.
    pub fn coulomb(&self, k2: f64) -> f64 {
        match *self {
            PekarKernel::Periodic => {
                if k2 == 0.0 {
                    0.0
                } else {
                    4.0 * PI / k2
                }
            }
            PekarKernel::Truncated { radius } => cutoff_kernel(radius, k2),
        }
    }

    /// Fourier value of the screened kernel `4 pi / (k^T eps k)`; `lambda_min` is the smallest
    /// eigenvalue of `eps`.
    pub fn screened(&self, eps: &DielectricMatrix, lambda_min: f64, k: &Vector3<f64>) -> Result<f64> {
        let q = eps.quad(k);
        if k.norm_squared() > 0.0 && !(q > 0.0) {
            return Err(Error::SingularEps);
        }
        Ok(match *self {
            PekarKernel::Periodic => {
                if q == 0.0 {
                    0.0
                } else {
                    4.0 * PI / q
                }
            }
            PekarKernel::Truncated { radius } => cutoff_kernel(radius / lambda_min.sqrt(), q),
        })
    }
}

/// A density functional `I[rho]` with its derivative.
pub trait DensityFunctional {
    /// `(I[rho], dI/drho)`.
    fn evaluate(&self, rho: &Field) -> Result<(f64, Field)>;
}

/// `F^P[rho] = 1/2 int rho (W_rho - rho * |x|^-1)`.
#[derive(Clone, Debug)]
pub struct PekarFunctional {
    pub eps: DielectricMatrix,
    pub kernel: PekarKernel,
    table: Vec<f64>,
    lambda_min: f64,
    domain: Arc<Domain>,
}

impl PekarFunctional {
    pub fn new(domain: &Arc<Domain>, eps: DielectricMatrix, kernel: PekarKernel) -> Result<Self> {
        let lambda_min = eps.eigenvalues()[0];
        let table = (0..domain.len())
            .map(|i| Ok(kernel.screened(&eps, lambda_min, &domain.kvec(i))? - kernel.coulomb(domain.k2(i))))
            .collect::<Result<Vec<_>>>()?;
        Ok(PekarFunctional { eps, kernel, table, lambda_min, domain: domain.clone() })
    }

    pub fn interaction(&self, rho: &Field) -> Result<f64> {
        self.check(rho)?;
        let s: f64 = rho.coeffs.iter().zip(&self.table).map(|(c, k)| c.norm_sqr() * k).sum();
        Ok(0.5 * rho.domain.volume() * s)
    }

    /// `F^P` from the real-space pairing of `rho` with `W_rho` and `rho * |x|^-1`, each built
    /// separately.
    pub fn interaction_real_space(&self, rho: &Field) -> Result<f64> {
        self.check(rho)?;
        let d = &rho.domain;
        let mut w = Field::zeros(d, FieldKind::Potential);
        let mut v = Field::zeros(d, FieldKind::Potential);
        for i in 0..d.len() {
            w.coeffs[i] = rho.coeffs[i] * self.kernel.screened(&self.eps, self.lambda_min, &d.kvec(i))?;
            v.coeffs[i] = rho.coeffs[i] * self.kernel.coulomb(d.k2(i));
        }
        let (w, v, r) = (w.real_values(), v.real_values(), rho.real_values());
        Ok(0.5 * d.dv() * r.iter().zip(w.iter().zip(&v)).map(|(a, (b, c))| a * (b - c)).sum::<f64>())
    }

    fn check(&self, rho: &Field) -> Result<()> {
        if rho.domain.same_as(&self.domain) {
            Ok(())
        } else {
            Err(Error::DomainMismatch)
        }
    }
}

impl DensityFunctional for PekarFunctional {
    fn evaluate(&self, rho: &Field) -> Result<(f64, Field)> {
        self.check(rho)?;
        let mut pot = Field::zeros(&rho.domain, FieldKind::Potential);
        for (i, c) in pot.coeffs.iter_mut().enumerate() {
            *c = rho.coeffs[i] * self.table[i];
        }
        let e = 0.5 * rho.l2_dot(&pot).re;
        Ok((e, pot))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Recentre the density every this many iterations (0 disables).
    pub recenter_every: usize,
    pub seed: u64,
    /// Width of the initial Gaussian.
    pub init_width: f64,
    /// Relative amplitude of the random perturbation of the initial state.
    pub noise: f64,
    /// Raise BoxTooSmall when the outer shell carries too much mass.
    pub check_box: bool,
    /// Largest outer-shell mass accepted by the box check.
    pub shell_tol: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions { tol: 1e-9, max_iter: 5000, recenter_every: 50, seed: 0, init_width: 1.0, noise: 0.0, check_box: true, shell_tol: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct EnergyParts {
    pub kinetic: f64,
    pub external: f64,
    pub interaction: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct OneBodyGround {
    pub psi: Field,
    pub parts: EnergyParts,
    pub multiplier: f64,
    pub residual: f64,
    pub iterations: usize,
    /// Energy after every accepted step.
    pub history: Vec<f64>,
}

/// `E[psi] = 1/2 int |grad psi|^2 + int V |psi|^2 + I[|psi|^2]` for a real wavefunction on a
/// periodic box.
pub struct OneBodyProblem<'a> {
    pub domain: Arc<Domain>,
    pub external: Option<Vec<f64>>,
    pub interaction: &'a dyn DensityFunctional,
}

pub fn kinetic_energy(psi: &Field) -> f64 {
    let d = &psi.domain;
    0.5 * d.volume() * psi.coeffs.iter().enumerate().map(|(i, c)| c.norm_sqr() * d.k2(i)).sum::<f64>()
}

pub fn density_of(psi: &Field) -> Field {
    let v: Vec<f64> = psi.values().iter().map(|z| z.norm_sqr()).collect();
    Field::from_real_values(&psi.domain, &v, FieldKind::Density)
}

struct Eval {
    parts: EnergyParts,
    /// Total potential `V + dI/drho` on the grid.
    potential: Vec<f64>,
}

impl<'a> OneBodyProblem<'a> {
    fn eval(&self, psi: &Field) -> Result<Eval> {
        let rho = density_of(psi);
        let (interaction, p) = self.interaction.evaluate(&rho)?;
        let mut potential = p.real_values();
        let rv = rho.real_values();
        let dv = self.domain.dv();
        let mut external = 0.0;
        if let Some(v) = &self.external {
            for ((t, &a), &r) in potential.iter_mut().zip(v).zip(&rv) {
                *t += a;
                external += a * r * dv;
            }
        }
        let kinetic = kinetic_energy(psi);
        Ok(Eval { parts: EnergyParts { kinetic, external, interaction, total: kinetic + external + interaction }, potential })
    }

    pub fn energy(&self, psi: &Field) -> Result<EnergyParts> {
        Ok(self.eval(psi)?.parts)
    }

    /// `H psi` with `H = -Delta/2 + V + dI/drho`; the derivative of the energy along `h` is
    /// `2 Re <h, H psi>`.
    pub fn gradient(&self, psi: &Field) -> Result<Field> {
        let e = self.eval(psi)?;
        Ok(self.apply_h(psi, &e.potential))
    }

    fn apply_h(&self, psi: &Field, potential: &[f64]) -> Field {
        let d = &self.domain;
        let vals = psi.values();
        let vp: Vec<C64> = vals.iter().zip(potential).map(|(z, v)| z * v).collect();
        let mut out = Field::from_values(d, &vp, psi.kind);
        for (i, c) in out.coeffs.iter_mut().enumerate() {
            *c += psi.coeffs[i] * (0.5 * d.k2(i));
        }
        out
    }

    /// Normalized, kinetic-preconditioned gradient flow with backtracking, started from `psi0`.
    pub fn minimize(&self, psi0: Field, opts: &FlowOptions) -> Result<OneBodyGround> {
        let d = self.domain.clone();
        let mut psi = normalized(psi0.realified());
        let mut cur = self.eval(&psi)?;
        let mut history = vec![cur.parts.total];
        let mut tau: f64 = 1.0;
        let mut prev_dir: Option<Field> = None;
        let mut prev_rr = 0.0;
        let mut state = self.residual_of(&psi, &cur);
        for it in 0..opts.max_iter {
            let (hpsi, r, multiplier, residual) = state;
            if residual <= opts.tol {
                return self.finish(psi, cur, multiplier, residual, it, history, opts);
            }
            let shift = cur.parts.kinetic.max(multiplier.abs()).max(1e-6);
            let mut pr = r;
            for (i, c) in pr.coeffs.iter_mut().enumerate() {
                *c /= 0.5 * d.k2(i) + shift;
            }
            let rr = pr.l2_dot(&pr).re;
            let mut dir = pr.scaled(-1.0);
            if let Some(p) = &prev_dir {
                let beta = (rr / prev_rr).min(1.0);
                dir.axpy(beta, p);
            }
            let along = psi.l2_dot(&dir).re;
            dir.axpy(-along, &psi);
            let slope = 2.0 * hpsi.l2_dot(&dir).re;
            if slope >= 0.0 {
                dir = pr.scaled(-1.0);
                let along = psi.l2_dot(&dir).re;
                dir.axpy(-along, &psi);
            }
            // Trust region: a long first step can overshoot onto the delocalized critical point.
            tau = tau.min(MAX_STEP / dir.l2_norm());
            let mut accepted = None;
            for _ in 0..40 {
                let mut trial = psi.clone();
                trial.axpy(tau, &dir);
                let trial = normalized(trial);
                let e = self.eval(&trial)?;
                let slack = ENERGY_SLACK * cur.parts.total.abs();
                let decrease = e.parts.total < cur.parts.total - slack;
                // Energy changes below rounding carry no information; judge by the residual.
                let tie = (e.parts.total - cur.parts.total).abs() <= slack;
                let next = self.residual_of(&trial, &e);
                if decrease || (tie && next.3 < residual) {
                    accepted = Some((trial, e, next));
                    tau = (tau * 1.3).min(4.0);
                    break;
                }
                tau *= 0.5;
            }
            let Some((p, e, next)) = accepted else {
                return Err(Error::NoConvergence { what: "gradient flow", iterations: it, residual });
            };
            psi = p;
            cur = e;
            state = next;
            history.push(cur.parts.total);
            prev_dir = Some(dir);
            prev_rr = rr;
            if opts.recenter_every > 0 && (it + 1) % opts.recenter_every == 0 {
                psi = recentered(&psi);
                cur = self.eval(&psi)?;
                state = self.residual_of(&psi, &cur);
                prev_dir = None;
            }
        }
        Err(Error::NoConvergence { what: "gradient flow", iterations: opts.max_iter, residual: state.3 })
    }

    /// `(H psi, H psi - lambda psi, lambda, ||H psi - lambda psi||)`.
    fn residual_of(&self, psi: &Field, e: &Eval) -> (Field, Field, f64, f64) {
        let hpsi = self.apply_h(psi, &e.potential);
        let multiplier = psi.l2_dot(&hpsi).re;
        let mut r = hpsi.clone();
        r.axpy(-multiplier, psi);
        let n = r.l2_norm();
        (hpsi, r, multiplier, n)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        psi: Field,
        cur: Eval,
        multiplier: f64,
        residual: f64,
        iterations: usize,
        history: Vec<f64>,
        opts: &FlowOptions,
    ) -> Result<OneBodyGround> {
        let psi = recentered(&psi);
        if opts.check_box {
            let shell_mass = outer_shell_mass(&density_of(&psi));
            if shell_mass > opts.shell_tol {
                return Err(Error::BoxTooSmall { shell_mass });
            }
        }
        Ok(OneBodyGround { psi, parts: cur.parts, multiplier, residual, iterations, history })
    }
}

const MAX_STEP: f64 = 0.2;
const ENERGY_SLACK: f64 = 1e-13;

fn normalized(psi: Field) -> Field {
    let n = psi.l2_norm();
    psi.scaled(1.0 / n)
}

/// Periodic centroid of a nonnegative density in fractional coordinates.
pub fn centroid(rho: &Field) -> Vector3<f64> {
    let d = &rho.domain;
    let mut f = [0.0; 3];
    for (ax, slot) in f.iter_mut().enumerate() {
        let mut g = [0; 3];
        g[ax] = 1;
        // The first Fourier mode encodes the circular mean.
        let c = rho.coeffs[d.index_of_freq(g).expect("grid has at least 3 points per axis")];
        *slot = (-c.arg() / (2.0 * PI)).rem_euclid(1.0);
    }
    Vector3::new(f[0], f[1], f[2])
}

/// Translate so that the density centroid sits at the box centre.
pub fn recentered(psi: &Field) -> Field {
    let d = &psi.domain;
    let c = centroid(&density_of(psi));
    let shift = d.lattice.basis * (Vector3::new(0.5, 0.5, 0.5) - c);
    psi.translated(shift).realified()
}

/// Mass fraction of the density within a tenth of the box side from a face, for a density
/// centred in the box.
pub fn outer_shell_mass(rho: &Field) -> f64 {
    let d = &rho.domain;
    let vals = rho.real_values();
    let total: f64 = vals.iter().sum();
    let mut shell = 0.0;
    for (i, v) in vals.iter().enumerate() {
        let s = d.unflatten(i);
        let outer = (0..3).any(|ax| {
            let f = s[ax] as f64 / d.dims[ax] as f64;
            (f - 0.5).abs() > 0.4
        });
        if outer {
            shell += v;
        }
    }
    if total > 0.0 {
        shell / total
    } else {
        0.0
    }
}

/// Isotropic normalized Gaussian at the box centre, with an optional smooth random perturbation.
pub fn initial_gaussian(domain: &Arc<Domain>, width: f64, noise: f64, seed: u64) -> Field {
    let centre = domain.lattice.basis * Vector3::new(0.5, 0.5, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<(Vector3<f64>, f64)> = (0..4)
        .map(|_| {
            let off = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * width;
            (off, rng.gen_range(-1.0..1.0))
        })
        .collect();
    let f = Field::from_fn(domain, FieldKind::WavefunctionWeight, |x| {
        let r = x - centre;
        let base = (-0.5 * r.norm_squared() / (width * width)).exp();
        let pert: f64 = bumps.iter().map(|(o, a)| a * (-0.5 * (r - o).norm_squared() / (width * width)).exp()).sum();
        base * (1.0 + noise * pert)
    });
    normalized(f)
}

#[derive(Clone, Debug)]
pub struct PekarState {
    pub psi: Field,
    pub eps: DielectricMatrix,
    pub kernel: PekarKernel,
    pub energy: f64,
    pub kinetic: f64,
    pub interaction: f64,
    pub multiplier: f64,
    pub residual: f64,
    pub iterations: usize,
    /// Energy after every accepted step of the flow.
    pub history: Vec<f64>,
}

impl PekarState {
    /// `|2 T + F^P| / |E|`.
    pub fn virial_defect(&self) -> f64 {
        (2.0 * self.kinetic + self.interaction).abs() / self.energy.abs()
    }
}

pub fn solve_pekar_ground(
    eps: &DielectricMatrix,
    domain: &Arc<Domain>,
    kernel: PekarKernel,
    opts: &FlowOptions,
) -> Result<PekarState> {
    let ev = eps.eigenvalues();
    if ev.iter().any(|&e| e < 1.0 - 1e-12) {
        return Err(Error::Invariant(format!("dielectric eigenvalues {ev:?} below 1")));
    }
    if eps.is_identity(1e-12) {
        return Err(Error::NoBinding);
    }
    let functional = PekarFunctional::new(domain, eps.clone(), kernel)?;
    let problem = OneBodyProblem { domain: domain.clone(), external: None, interaction: &functional };
    let psi0 = initial_gaussian(domain, opts.init_width, opts.noise, opts.seed);
    let g = problem.minimize(psi0, opts)?;
    Ok(PekarState {
        psi: g.psi,
        eps: eps.clone(),
        kernel,
        energy: g.parts.total,
        kinetic: g.parts.kinetic,
        interaction: g.parts.interaction,
        multiplier: g.multiplier,
        residual: g.residual,
        iterations: g.iterations,
        history: g.history,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PekarEnergy {
    pub total: f64,
    pub kinetic: f64,
    pub interaction: f64,
    /// The interaction evaluated in real space.
    pub interaction_real_space: f64,
}

pub fn pekar_energy(psi: &Field, eps: &DielectricMatrix, kernel: PekarKernel) -> Result<PekarEnergy> {
    let f = PekarFunctional::new(&psi.domain, eps.clone(), kernel)?;
    let rho = density_of(psi);
    let kinetic = kinetic_energy(psi);
    let interaction = f.interaction(&rho)?;
    Ok(PekarEnergy {
        total: kinetic + interaction,
        kinetic,
        interaction,
        interaction_real_space: f.interaction_real_space(&rho)?,
    })
}

/// Relative spread of a density over directions at fixed distances from `centre`, evaluated by
/// Fourier interpolation: the largest over `radii` of (max - min)/mean.
pub fn radial_anisotropy(rho: &Field, centre: Vector3<f64>, radii: &[f64]) -> f64 {
    let d = &rho.domain;
    let mut dirs = vec![];
    for a in -1i32..=1 {
        for b in -1i32..=1 {
            for c in -1i32..=1 {
                if (a, b, c) != (0, 0, 0) {
                    dirs.push(Vector3::new(a as f64, b as f64, c as f64).normalize());
                }
            }
        }
    }
    let kv: Vec<Vector3<f64>> = (0..d.len()).map(|i| d.kvec(i)).collect();
    let eval = |x: Vector3<f64>| -> f64 {
        rho.coeffs.iter().zip(&kv).map(|(c, k)| (c * C64::from_polar(1.0, k.dot(&x))).re).sum()
    };
    let mut worst = 0.0f64;
    for &r in radii {
        let v: Vec<f64> = dirs.iter().map(|e| eval(centre + e * r)).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max((hi - lo) / mean.abs());
    }
    worst
}

/// Two-electron wavefunction `Psi(x1, x2)` on the product grid, stored with `x1` major.
#[derive(Clone, Debug)]
pub struct TwoBodyGrid {
    pub domain: Arc<Domain>,
    pub values: Vec<C64>,
}

impl TwoBodyGrid {
    /// Normalized antisymmetrized product `(a(x1) b(x2) - b(x1) a(x2)) / sqrt 2` for orthonormal
    /// `a`, `b`.
    pub fn from_orbitals(a: &Field, b: &Field) -> Self {
        let va = a.values();
        let vb = b.values();
        let n = va.len();
        let mut values = vec![C64::new(0.0, 0.0); n * n];
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = (va[i] * vb[j] - vb[i] * va[j]) * s;
            }
        }
        TwoBodyGrid { domain: a.domain.clone(), values }
    }

    pub fn norm_sqr(&self) -> f64 {
        let dv = self.domain.dv();
        self.values.iter().map(|z| z.norm_sqr()).sum::<f64>() * dv * dv
    }

    /// `max |Psi(x1,x2) + Psi(x2,x1)|`.
    pub fn antisymmetry_defect(&self) -> f64 {
        let n = self.domain.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((self.values[i * n + j] + self.values[j * n + i]).norm());
            }
        }
        worst
    }

    /// `rho(x) = 2 int |Psi(x, y)|^2 dy`.
    pub fn density(&self) -> Field {
        let n = self.domain.len();
        let dv = self.domain.dv();
        let r: Vec<f64> = (0..n).map(|i| 2.0 * dv * self.values[i * n..(i + 1) * n].iter().map(|z| z.norm_sqr()).sum::<f64>()).collect();
        Field::from_real_values(&self.domain, &r, FieldKind::Density)
    }

    fn kinetic(&self) -> f64 {
        let d = &self.domain;
        let n = d.len();
        let dv = d.dv();
        let mut t = 0.0;
        // Second coordinate: rows are contiguous.
        for i in 0..n {
            let c = d.forward(&self.values[i * n..(i + 1) * n]);
            t += dv * d.volume() * c.iter().enumerate().map(|(k, z)| z.norm_sqr() * d.k2(k)).sum::<f64>();
        }
        let mut col = vec![C64::new(0.0, 0.0); n];
        for j in 0..n {
            for i in 0..n {
                col[i] = self.values[i * n + j];
            }
            let c = d.forward(&col);
            t += dv * d.volume() * c.iter().enumerate().map(|(k, z)| z.norm_sqr() * d.k2(k)).sum::<f64>();
        }
        0.5 * t
    }

    /// `int |Psi|^2 G(x1 - x2)` with `G` the real-space kernel.
    fn repulsion(&self, kernel: PekarKernel) -> f64 {
        let d = &self.domain;
        let n = d.len();
        let gk: Vec<C64> = (0..n).map(|i| C64::new(kernel.coulomb(d.k2(i)) / d.volume(), 0.0)).collect();
        let g = d.inverse(&gk);
        let dv = d.dv();
        let mut s = 0.0;
        for i in 0..n {
            let si = d.unflatten(i);
            for j in 0..n {
                let sj = d.unflatten(j);
                let diff = [0, 1, 2].map(|a| (si[a] + d.dims[a] - sj[a]) % d.dims[a]);
                s += self.values[i * n + j].norm_sqr() * g[d.flatten(diff)].re;
            }
        }
        s * dv * dv
    }
}

#[derive(Clone, Debug)]
pub enum ManyBodyTrialState {
    /// Orthonormal orbitals of a Slater determinant.
    Slater(Vec<Field>),
    Grid(TwoBodyGrid),
}

impl ManyBodyTrialState {
    pub fn n(&self) -> usize {
        match self {
            ManyBodyTrialState::Slater(o) => o.len(),
            ManyBodyTrialState::Grid(_) => 2,
        }
    }

    pub fn density(&self) -> Field {
        match self {
            ManyBodyTrialState::Slater(o) => {
                let mut rho = density_of(&o[0]);
                for phi in &o[1..] {
                    rho.axpy(1.0, &density_of(phi));
                }
                rho
            }
            ManyBodyTrialState::Grid(g) => g.density(),
        }
    }
}

/// Gram-Schmidt orthonormalization in `L^2`.
pub fn orthonormalize(orbitals: &[Field]) -> Vec<Field> {
    let mut out: Vec<Field> = vec![];
    for phi in orbitals {
        let mut v = phi.clone();
        for q in &out {
            let c = q.l2_dot(&v);
            for (a, b) in v.coeffs.iter_mut().zip(&q.coeffs) {
                *a -= c * b;
            }
        }
        out.push(normalized(v));
    }
    out
}

fn product_density(a: &Field, b: &Field) -> Field {
    let va = a.values();
    let vb = b.values();
    let p: Vec<C64> = va.iter().zip(&vb).map(|(x, y)| x.conj() * y).collect();
    Field::from_values(&a.domain, &p, FieldKind::Density)
}

fn kernel_pairing(kernel: PekarKernel, f: &Field, g: &Field) -> f64 {
    let d = &f.domain;
    let s: f64 = (0..d.len()).map(|i| (f.coeffs[i].conj() * g.coeffs[i]).re * kernel.coulomb(d.k2(i))).sum();
    s * d.volume()
}

/// Kinetic energy, pairwise repulsion and Pekar interaction of the density of a trial state.
pub fn pekar_energy_nbody(trial: &ManyBodyTrialState, eps: &DielectricMatrix, kernel: PekarKernel) -> Result<f64> {
    let (kinetic, repulsion, domain) = match trial {
        ManyBodyTrialState::Slater(orbs) => {
            let d = orbs[0].domain.clone();
            for (i, a) in orbs.iter().enumerate() {
                for (j, b) in orbs.iter().enumerate() {
                    let target = if i == j { 1.0 } else { 0.0 };
                    if (a.l2_dot(b) - target).norm() > 1e-10 {
                        return Err(Error::Invariant("Slater orbitals are not orthonormal".into()));
                    }
                }
            }
            let kinetic: f64 = orbs.iter().map(kinetic_energy).sum();
            let mut rep = 0.0;
            for a in orbs {
                for b in orbs {
                    let direct = kernel_pairing(kernel, &density_of(a), &density_of(b));
                    let x = product_density(a, b);
                    let exchange = kernel_pairing(kernel, &x, &x);
                    rep += 0.5 * (direct - exchange);
                }
            }
            (kinetic, rep, d)
        }
        ManyBodyTrialState::Grid(g) => (g.kinetic(), g.repulsion(kernel), g.domain.clone()),
    };
    let f = PekarFunctional::new(&domain, eps.clone(), kernel)?;
    Ok(kinetic + repulsion + f.interaction(&trial.density())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Lattice;
    use nalgebra::Matrix3;

    fn small_box() -> Arc<Domain> {
        Domain::new(Lattice::cubic(40.0), [32; 3])
    }

    #[test]
    fn identity_has_no_binding() {
        let r = solve_pekar_ground(&DielectricMatrix::identity(), &small_box(), PekarKernel::Periodic, &FlowOptions::default());
        assert!(matches!(r, Err(Error::NoBinding)));
        let psi = initial_gaussian(&small_box(), 3.0, 0.0, 0);
        assert_eq!(pekar_energy(&psi, &DielectricMatrix::identity(), PekarKernel::Periodic).unwrap().interaction, 0.0);
    }

    #[test]
    fn constant_state() {
        let d = small_box();
        let psi = Field::from_fn(&d, FieldKind::WavefunctionWeight, |_| 1.0 / d.volume().sqrt());
        let e = pekar_energy(&psi, &DielectricMatrix::isotropic(3.0), PekarKernel::Periodic).unwrap();
        assert!(e.kinetic.abs() < 1e-14 && e.interaction.abs() < 1e-14);
    }

    #[test]
    fn double_evaluation_and_translation() {
        let d = small_box();
        let psi = initial_gaussian(&d, 3.0, 0.3, 7);
        let eps = DielectricMatrix { eps: Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0)), report: None };
        for kernel in [PekarKernel::Periodic, PekarKernel::truncated_for(&d, &eps)] {
            let e = pekar_energy(&psi, &eps, kernel).unwrap();
            assert!(e.interaction < 0.0);
            assert!((e.interaction - e.interaction_real_space).abs() <= 1e-10 * e.interaction.abs());
            let t = pekar_energy(&psi.translated(Vector3::new(1.3, -0.4, 2.2)), &eps, kernel).unwrap();
            assert!((t.total - e.total).abs() <= 1e-10 * e.total.abs());
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = small_box();
        let eps = DielectricMatrix { eps: Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, 2.5)), report: None };
        let f = PekarFunctional::new(&d, eps, PekarKernel::Periodic).unwrap();
        let ext: Vec<f64> = (0..d.len()).map(|i| 0.01 * (d.position(i).x * 0.3).sin()).collect();
        let p = OneBodyProblem { domain: d.clone(), external: Some(ext), interaction: &f };
        let psi = initial_gaussian(&d, 3.0, 0.2, 1);
        let g = p.gradient(&psi).unwrap();
        for s in 0..10 {
            let h = initial_gaussian(&d, 2.0, 1.0, 100 + s).translated(Vector3::new(s as f64, 0.5, -1.0)).realified();
            let exact = 2.0 * h.l2_dot(&g).re;
            let step = 1e-4;
            let mut a = psi.clone();
            a.axpy(step, &h);
            let mut b = psi.clone();
            b.axpy(-step, &h);
            let fd = (p.energy(&a).unwrap().total - p.energy(&b).unwrap().total) / (2.0 * step);
            assert!((fd - exact).abs() <= 1e-6 * exact.abs(), "{fd} {exact}");
        }
    }

    #[test]
    fn flow_decreases_energy() {
        let d = small_box();
        let eps = DielectricMatrix::isotropic(8.0);
        let opts = FlowOptions { tol: 1e-7, check_box: false, ..FlowOptions::default() };
        let s = solve_pekar_ground(&eps, &d, PekarKernel::truncated_for(&d, &eps), &opts).unwrap();
        assert!(s.history.windows(2).all(|w| w[1] <= w[0] + 1e-13 * w[0].abs()));
        assert!(s.energy < 0.0 && s.residual <= 1e-7, "{} {} {} {}", s.energy, s.residual, s.iterations, s.kinetic);
        assert!((s.psi.l2_norm() - 1.0).abs() < 1e-12);
        assert!((s.energy - s.kinetic - s.interaction).abs() < 1e-15);
        let c = centroid(&density_of(&s.psi));
        assert!((c - Vector3::new(0.5, 0.5, 0.5)).norm() < 1e-8);
    }

    #[test]
    fn orbital_swap_and_grid_agree() {
        let d = Domain::new(Lattice::cubic(30.0), [8; 3]);
        let a = initial_gaussian(&d, 4.0, 0.0, 0).translated(Vector3::new(-4.0, 0.0, 0.0));
        let b = initial_gaussian(&d, 4.0, 0.0, 0).translated(Vector3::new(5.0, 1.0, 0.0));
        let orbs = orthonormalize(&[a, b]);
        let eps = DielectricMatrix::isotropic(3.0);
        let k = PekarKernel::Periodic;
        let e1 = pekar_energy_nbody(&ManyBodyTrialState::Slater(orbs.clone()), &eps, k).unwrap();
        let e2 = pekar_energy_nbody(&ManyBodyTrialState::Slater(vec![orbs[1].clone(), orbs[0].clone()]), &eps, k).unwrap();
        assert!((e1 - e2).abs() < 1e-12 * e1.abs());
        let g = TwoBodyGrid::from_orbitals(&orbs[0], &orbs[1]);
        assert!(g.antisymmetry_defect() < 1e-14);
        assert!((g.norm_sqr() - 1.0).abs() < 1e-12);
        assert!((g.density().integral() - 2.0).abs() < 1e-12);
        let e3 = pekar_energy_nbody(&ManyBodyTrialState::Grid(g), &eps, k).unwrap();
        assert!((e1 - e3).abs() < 1e-9 * e1.abs(), "{e1} {e3}");
    }

    #[test]
    fn distant_orbitals_decouple() {
        let d = Domain::new(Lattice::new(Matrix3::from_diagonal(&Vector3::new(120.0, 30.0, 30.0))).unwrap(), [96, 24, 24]);
        let shift = Vector3::new(30.0, 0.0, 0.0);
        let a = initial_gaussian(&d, 2.0, 0.0, 0).translated(-shift);
        let b = initial_gaussian(&d, 2.0, 0.0, 0).translated(shift);
        let orbs = orthonormalize(&[a.clone(), b.clone()]);
        let k = PekarKernel::truncated_for(&d, &DielectricMatrix::identity());
        let e = pekar_energy_nbody(&ManyBodyTrialState::Slater(orbs), &DielectricMatrix::identity(), k).unwrap();
        let t = kinetic_energy(&a) + kinetic_energy(&b);
        assert!((e - t).abs() < 1e-8, "{e} {t}");
    }
}
