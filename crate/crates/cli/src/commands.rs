use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Vector3;
use serde_json::json;

use polaron::cell::{e_per_convergence, solve_u_per};
use polaron::checkpoint::Checkpoint;
use polaron::config::{resolve_eps, Config, EpsSource};
use polaron::crystal::{poisson_residual, CrystalGroundState};
use polaron::defect::{scf_defect, tr0_charge};
use polaron::harness::{pekar_reference, run_counterexample, run_macrolimit, run_polaron_limit, ConvergenceReport, Lab};
use polaron::response::DielectricMatrix;
use polaron::verify::{self, Check, CHOQUARD_E0};
use polaron::{gaussian_density, Error, Result};

use crate::{DefectArgs, PekarArgs};

/// Criteria that make up the invariant suite: exact identities, bounds and the dielectric
/// matrix invariants.
const INVARIANT_CRITERIA: [u32; 3] = [1, 2, 4];

pub struct Session {
    cfg: Config,
    out: PathBuf,
    lab: Option<Lab>,
    checks: Vec<Check>,
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("report types serialize")
}

impl Session {
    pub fn open(config: Option<&Path>, out: Option<PathBuf>) -> Result<Self> {
        let cfg = match config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        let out = out.unwrap_or_else(|| cfg.output.dir.clone());
        Ok(Session { cfg, out, lab: None, checks: vec![] })
    }

    fn lab(&mut self) -> Result<&Lab> {
        if self.lab.is_none() {
            let crystal = Arc::new(self.cfg.crystal.solve()?);
            self.lab = Some(Lab::new(self.cfg.clone(), crystal));
        }
        Ok(self.lab.as_ref().expect("just built"))
    }

    fn crystal_state(&mut self) -> Result<Arc<CrystalGroundState>> {
        Ok(self.lab()?.crystal.clone())
    }

    fn checkpoint(&self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        if !self.cfg.output.checkpoints {
            return Ok(());
        }
        let dir = self.out.join("checkpoints");
        std::fs::create_dir_all(&dir)?;
        ckpt.write(&dir.join(name))
    }

    pub fn crystal(&mut self) -> Result<()> {
        let gs = self.crystal_state()?;
        let poisson = poisson_residual(&gs);
        let ortho = gs.bloch.max_orthonormality_defect();
        let summary = json!({
            "energy": gs.energy,
            "gap": gs.gap,
            "fermi_level": gs.fermi_level,
            "iterations": gs.iterations,
            "scf_residual": gs.scf_residual,
            "poisson_residual": poisson,
            "orthonormality_defect": ortho,
            "plane_waves": gs.basis.len(),
            "cell_grid": gs.domain.dims,
        });
        write_json(&self.out, "crystal.json", &summary)?;
        let mut ck = Checkpoint::new(&gs.domain, Some(self.cfg.crystal.ecut), json!({"kind": "crystal"}));
        ck.push_field("mu0", &gs.mu0);
        ck.push_field("rho0", &gs.rho0);
        ck.push_field("v0", &gs.v0);
        self.checkpoint("crystal.ckpt", &ck)?;
        println!("crystal: gap {:.10} fermi level {:.10} energy {:.10}", gs.gap, gs.fermi_level, gs.energy);
        self.checks.push(Check::above("crystal_gap", gs.gap, 0.0));
        self.checks.push(Check::at_most("crystal_poisson_residual", poisson, 1e-10));
        self.checks.push(Check::at_most("crystal_orthonormality", ortho, 1e-10));
        Ok(())
    }

    pub fn cellmode(&mut self) -> Result<()> {
        let gs = self.crystal_state()?;
        let m_list = self.cfg.cellmode.m_list.clone();
        let table = e_per_convergence(&gs.v0, &m_list)?;
        let mut w = String::from("m,e_over_m,e_per,difference,expansion_defect,spectral_gap\n");
        for r in &table.rows {
            w.push_str(&format!("{},{},{},{},{},{}\n", r.m, r.e_over_m, r.e_per, r.difference, r.expansion_defect, r.spectral_gap));
        }
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join("cellmode.csv"), w)?;
        write_json(&self.out, "cellmode.json", &to_json(&table))?;
        let m = *m_list.last().expect("validated non-empty");
        let mode = solve_u_per(&gs.v0, m)?;
        let mut ck = Checkpoint::new(&gs.domain, None, json!({"kind": "cellmode", "m": m}));
        ck.push_field("u", &mode.u);
        ck.push_field("f_per", &mode.f);
        self.checkpoint("cellmode.ckpt", &ck)?;
        println!("cellmode: mode order {:?} energy order {:?}", table.mode_order, table.energy_order);
        let gap = table.rows.iter().map(|r| r.spectral_gap).fold(f64::INFINITY, f64::min);
        self.checks.push(Check::above("cell_spectral_gap", gap, 0.0));
        Ok(())
    }

    fn reference_eps(&mut self) -> Result<(DielectricMatrix, DielectricMatrix)> {
        self.lab()?.dielectric_pair()
    }

    pub fn response(&mut self) -> Result<()> {
        let (a, b) = self.reference_eps()?;
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join("eps.json"), serde_json::to_string_pretty(&a).map_err(|e| Error::Config(e.to_string()))?)?;
        let r = &self.cfg.response;
        let summary = json!({
            "primary_supercell": r.eps_supercell,
            "secondary_supercell": r.eps_secondary,
            "primary": to_json(&a),
            "secondary": to_json(&b),
            "eigenvalues": a.eigenvalues(),
            "spread": (a.eps - b.eps).abs().max(),
        });
        write_json(&self.out, "response.json", &summary)?;
        println!("response: eps eigenvalues {:?} (secondary {:?})", a.eigenvalues(), b.eigenvalues());
        self.checks.push(Check::at_most("eps_asymmetry", (a.eps - a.eps.transpose()).abs().max(), 1e-10));
        self.checks.push(Check::at_least("eps_smallest_eigenvalue", a.eigenvalues()[0], 1.0));
        Ok(())
    }

    pub fn defect(&mut self, args: &DefectArgs) -> Result<()> {
        let ctx = self.lab()?.context(args.supercell)?;
        let d = &ctx.sc.domain;
        let nu = gaussian_density(d, d.lattice.basis * Vector3::new(0.5, 0.5, 0.5), args.sigma, args.charge);
        let s = scf_defect(&ctx, &nu, &self.cfg.defect)?;
        let f_aux = ctx.f_aux(&nu)?;
        let dnn = s.d_nu_nu();
        let summary = json!({
            "supercell": args.supercell,
            "dim": ctx.sc.dim(),
            "f_crys": s.f_crys,
            "f_aux": f_aux,
            "d_nu_nu": dnn,
            "d_rho_rho": s.d_rho_rho(),
            "kinetic": s.kinetic,
            "hartree": s.hartree,
            "cross": s.cross,
            "tr0_charge": tr0_charge(&s),
            "projector_identity": s.projector_identity_defect(),
            "homo": s.homo,
            "lumo": s.lumo,
            "fermi_level": s.fermi_level,
            "iterations": s.iterations,
            "residual": s.residual,
        });
        write_json(&self.out, "defect.json", &summary)?;
        let mut ck = Checkpoint::new(d, None, json!({"kind": "defect", "sigma": args.sigma, "charge": args.charge}));
        ck.push_field("nu", &s.nu);
        ck.push_field("rho_q", &s.rho_q);
        ck.push_field("potential", &s.potential);
        if s.q.rows <= self.cfg.output.q_checkpoint_cap {
            ck.push("q", s.q.data.iter().flat_map(|z| [z.re, z.im]).collect(), None);
        }
        self.checkpoint("defect.ckpt", &ck)?;
        println!("defect: F_crys {:.12e} F_aux {:.12e} after {} iterations", s.f_crys, f_aux, s.iterations);
        let slack = 1e-12 * dnn;
        self.checks.push(Check::at_most("defect_f_crys_nonpositive", s.f_crys, slack));
        self.checks.push(Check::at_least("defect_f_crys_lower_bound", s.f_crys, -0.5 * dnn - slack));
        self.checks.push(Check::at_most("defect_coulomb_bound", s.d_rho_rho(), 4.0 * dnn + slack));
        self.checks.push(Check::at_most("defect_projector_identity", s.projector_identity_defect(), 1e-10));
        self.checks.push(Check::at_most("defect_tr0_charge", tr0_charge(&s).abs(), 1e-8));
        Ok(())
    }

    pub fn pekar(&mut self, args: &PekarArgs) -> Result<()> {
        let source = match &args.eps {
            Some(s) => s.parse::<f64>().map(EpsSource::Scalar).unwrap_or_else(|_| EpsSource::Named(s.clone())),
            None => self.cfg.pekar.eps.clone(),
        };
        let eps = match &source {
            EpsSource::Named(s) if s == "reference" => self.reference_eps()?.0,
            other => resolve_eps(other, || unreachable!("reference handled above"))?,
        };
        match pekar_reference(self.lab()?, &eps) {
            Err(Error::NoBinding) => {
                write_json(&self.out, "pekar.json", &json!({"status": "no_binding", "energy": 0.0, "eps": eps.eps}))?;
                println!("pekar: no binding (eps is the identity), energy 0");
                Ok(())
            }
            Err(e) => Err(e),
            Ok(s) => {
                let summary = json!({
                    "status": "bound",
                    "eps": s.eps.eps,
                    "energy": s.energy,
                    "kinetic": s.kinetic,
                    "interaction": s.interaction,
                    "multiplier": s.multiplier,
                    "residual": s.residual,
                    "virial_defect": s.virial_defect(),
                    "iterations": s.iterations,
                });
                write_json(&self.out, "pekar.json", &summary)?;
                let mut ck = Checkpoint::new(&s.psi.domain, None, json!({"kind": "pekar"}));
                ck.push_field("psi", &s.psi);
                self.checkpoint("pekar.ckpt", &ck)?;
                println!("pekar: energy {:.12e} virial defect {:.2e}", s.energy, s.virial_defect());
                self.checks.push(Check::at_most("pekar_energy", s.energy, 0.0));
                self.checks.push(Check::at_most("pekar_virial", s.virial_defect(), 1e-4));
                Ok(())
            }
        }
    }

    fn write_report(&self, rep: &ConvergenceReport) -> Result<()> {
        rep.write(&self.out)?;
        println!(
            "{}: extrapolated {:?} error bar {:.3e} ({} rows, {:.1} s)",
            rep.name,
            rep.extrapolated,
            rep.error_bar,
            rep.rows.len(),
            rep.runtime_seconds
        );
        Ok(())
    }

    pub fn limit(&mut self) -> Result<()> {
        let cg_tol = self.cfg.response.cg_tol;
        let lab = self.lab()?;
        let macro_rep = run_macrolimit(lab)?;
        let polaron_rep = run_polaron_limit(lab)?;
        self.write_report(&macro_rep)?;
        self.write_report(&polaron_rep)?;
        let get = |r: &ConvergenceReport, k: &str| r.checks.get(k).copied().unwrap_or(f64::NAN);
        self.checks.push(Check::at_most("macrolimit_aux_identity", get(&macro_rep, "aux_identity_residual"), cg_tol));
        self.checks.push(Check::at_most("macrolimit_pekar_cross_module", get(&macro_rep, "pekar_cross_module"), 1e-12));
        let dec = polaron_rep.rows.iter().filter_map(|r| r.extras.get("decouple_residual")).fold(0.0, |a: f64, b| a.max(*b));
        self.checks.push(Check::at_most("polaron_decoupling_residual", dec, 1e-11));
        Ok(())
    }

    pub fn counterexample(&mut self) -> Result<()> {
        let cg_tol = self.cfg.response.cg_tol;
        let rep = run_counterexample(self.lab()?)?;
        self.write_report(&rep)?;
        let spread = rep.checks.get("b_relative_spread").copied().unwrap_or(f64::NAN);
        self.checks.push(Check::at_most("counterexample_b_spread", spread, cg_tol));
        Ok(())
    }

    pub fn all(&mut self) -> Result<()> {
        self.crystal()?;
        self.cellmode()?;
        self.response()?;
        self.defect(&DefectArgs::default())?;
        self.pekar(&PekarArgs::default())?;
        self.limit()?;
        self.counterexample()
    }

    /// Invariant suite plus the checks collected by the commands; prints one line per
    /// violation and writes `verify.json`.
    pub fn verify(&mut self) -> Result<bool> {
        let lab = self.lab()?;
        let outcomes: Vec<_> = INVARIANT_CRITERIA.iter().map(|&id| verify::run(id, lab, CHOQUARD_E0)).collect();
        let mut ok = true;
        for o in &outcomes {
            println!("{}", o.line());
            ok &= o.pass();
        }
        for c in self.checks.iter().filter(|c| !c.pass) {
            println!("violation: {} = {:e} (bound {:e})", c.name, c.value, c.bound);
            ok = false;
        }
        write_json(&self.out, "verify.json", &json!({"pass": ok, "criteria": outcomes, "command_checks": self.checks}))?;
        Ok(ok)
    }
}
