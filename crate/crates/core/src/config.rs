//! Structured-text experiment configuration.
//!
//! Every section and key is optional; omitted values fall back to the reference setup. Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::crystal::{nuclear_density, scf_crystal, CrystalGroundState, ScfOptions, Site};
use crate::defect::DefectOptions;
use crate::error::{Error, Result};
use crate::lattice::{BZMesh, Lattice, PlaneWaveBasis};
use crate::pekar::FlowOptions;
use crate::response::{DielectricMatrix, ResponseOptions};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub crystal: CrystalConfig,
    pub response: ResponseConfig,
    pub defect: DefectOptions,
    pub cellmode: CellModeConfig,
    pub pekar: PekarConfig,
    pub macrolimit: MacroLimitConfig,
    pub counterexample: CounterexampleConfig,
    pub polaron: PolaronConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrystalConfig {
    /// Side of a simple cubic cell; ignored when `lattice_vectors` is set.
    pub a: f64,
    /// Lattice vectors as rows.
    pub lattice_vectors: Option<[[f64; 3]; 3]>,
    pub sites: Vec<Site>,
    /// Width of the Gaussian nuclei.
    pub sigma: f64,
    pub z: usize,
    pub ecut: f64,
    pub mesh: [usize; 3],
    pub n_bands: usize,
    pub mix: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CrystalConfig {
    fn default() -> Self {
        CrystalConfig {
            a: 10.0,
            lattice_vectors: None,
            sites: vec![Site { position: [0.0; 3], charge: 1.0 }],
            sigma: 0.3,
            z: 1,
            ecut: 0.6,
            mesh: [4; 3],
            n_bands: 5,
            mix: 0.5,
            tol: 1e-11,
            max_iter: 500,
        }
    }
}

impl CrystalConfig {
    pub fn lattice(&self) -> Result<Lattice> {
        match self.lattice_vectors {
            Some(rows) => Lattice::new(Matrix3::from_fn(|i, j| rows[j][i])),
            None => {
                if !(self.a > 0.0) {
                    return Err(Error::Config(format!("lattice constant {} must be positive", self.a)));
                }
                Ok(Lattice::cubic(self.a))
            }
        }
    }

    /// Side length of the (cubic) cell; the harness requires a cubic cell.
    pub fn cubic_side(&self) -> Result<f64> {
        let lat = self.lattice()?;
        let b = lat.basis;
        let a = b[(0, 0)];
        if (b - Matrix3::identity() * a).abs().max() > 1e-12 * a {
            return Err(Error::Config("the limit experiments need a simple cubic cell".into()));
        }
        Ok(a)
    }

    pub fn solve(&self) -> Result<CrystalGroundState> {
        if self.ecut < 0.0 {
            return Err(Error::Config(format!("ecut {} must be nonnegative", self.ecut)));
        }
        if self.z > self.n_bands {
            return Err(Error::Config(format!("n_bands {} below Z = {}", self.n_bands, self.z)));
        }
        let basis = PlaneWaveBasis::new(self.lattice()?, self.ecut)?;
        let domain = basis.cell_domain();
        let mu = nuclear_density(&basis, &domain, &self.sites, self.sigma);
        let mesh = BZMesh::gamma_centered(self.mesh);
        let opts = ScfOptions { n_bands: self.n_bands, mix: self.mix, tol: self.tol, max_iter: self.max_iter };
        scf_crystal(&mu, &basis, &mesh, self.z, &opts)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResponseConfig {
    pub n_empty: usize,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub band_tail_tol: f64,
    /// Supercell for the reference dielectric matrix.
    pub eps_supercell: usize,
    /// Second supercell; the spread between the two is the finite-size error bar.
    pub eps_secondary: usize,
}

impl Default for ResponseConfig {
    fn default() -> Self {
        ResponseConfig { n_empty: 4, cg_tol: 1e-10, cg_max_iter: 200, band_tail_tol: 1.0, eps_supercell: 24, eps_secondary: 12 }
    }
}

impl ResponseConfig {
    pub fn options(&self) -> ResponseOptions {
        ResponseOptions {
            n_empty: self.n_empty,
            cg_tol: self.cg_tol,
            cg_max_iter: self.cg_max_iter,
            band_tail_tol: self.band_tail_tol,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellModeConfig {
    pub m_list: Vec<f64>,
}

impl Default for CellModeConfig {
    fn default() -> Self {
        CellModeConfig { m_list: vec![0.2, 0.1, 0.05, 0.025] }
    }
}

/// Where the dielectric matrix of a Pekar run comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsSource {
    Scalar(f64),
    /// `"reference"` (extract from the crystal), `"identity"`, or a path to a JSON dielectric
    /// matrix written by the `response` command.
    Named(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PekarConfig {
    pub box_side: f64,
    pub grid: usize,
    pub eps: EpsSource,
    /// `"truncated"` or `"periodic"`.
    pub kernel: String,
    pub flow: FlowOptions,
}

impl Default for PekarConfig {
    fn default() -> Self {
        PekarConfig {
            box_side: 96.0,
            grid: 80,
            eps: EpsSource::Named("reference".into()),
            kernel: "truncated".into(),
            flow: FlowOptions { tol: 1e-8, shell_tol: 1e-5, ..FlowOptions::default() },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacroLimitConfig {
    pub m_list: Vec<f64>,
    /// Side of the macroscopic box; `box_side / (a m)` must be an integer for every m.
    pub box_side: f64,
    pub sigma: f64,
    pub charge: f64,
    /// Centre of the Gaussian in fractional coordinates of the box.
    pub centre: [f64; 3],
}

impl Default for MacroLimitConfig {
    fn default() -> Self {
        MacroLimitConfig { m_list: vec![0.5, 0.25, 1.0 / 6.0], box_side: 10.0, sigma: 1.5, charge: 0.3, centre: [0.5; 3] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterexampleConfig {
    pub m_list: Vec<f64>,
    pub supercell: usize,
    pub secondary_supercell: usize,
    /// Width and charge of the microscopic profile.
    pub sigma: f64,
    pub charge: f64,
    /// Fractional position inside the central cell of the supercell; the same crystal site
    /// is used for every supercell size.
    pub site: [f64; 3],
}

impl Default for CounterexampleConfig {
    fn default() -> Self {
        CounterexampleConfig { m_list: vec![0.5, 0.25, 1.0 / 6.0], supercell: 6, secondary_supercell: 4, sigma: 3.0, charge: 0.3, site: [0.0; 3] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolaronConfig {
    pub m_list: Vec<f64>,
    pub box_side: f64,
    pub flow: FlowOptions,
}

impl Default for PolaronConfig {
    fn default() -> Self {
        PolaronConfig {
            m_list: vec![1.0, 0.75, 0.6, 0.5],
            box_side: 30.0,
            flow: FlowOptions { tol: 1e-6, max_iter: 400, init_width: 4.0, check_box: false, ..FlowOptions::default() },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub checkpoints: bool,
    /// Largest Galerkin dimension for which `Q` is written to defect checkpoints.
    pub q_checkpoint_cap: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out"), checkpoints: true, q_checkpoint_cap: 400 }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        check_decreasing("cellmode.m_list", &self.cellmode.m_list)?;
        check_decreasing("macrolimit.m_list", &self.macrolimit.m_list)?;
        check_decreasing("counterexample.m_list", &self.counterexample.m_list)?;
        check_decreasing("polaron.m_list", &self.polaron.m_list)?;
        if self.pekar.kernel != "truncated" && self.pekar.kernel != "periodic" {
            return Err(Error::Config(format!("unknown Pekar kernel {:?}", self.pekar.kernel)));
        }
        if !(self.defect.mix > 0.0 && self.defect.mix <= 1.0) {
            return Err(Error::Config(format!("defect.mix {} not in (0,1]", self.defect.mix)));
        }
        let a = self.crystal.cubic_side();
        if let Ok(a) = a {
            for &m in &self.macrolimit.m_list {
                supercell_for(self.macrolimit.box_side, a, m)?;
            }
            for &m in &self.polaron.m_list {
                supercell_for(self.polaron.box_side, a, m)?;
            }
        }
        Ok(())
    }
}

fn check_decreasing(name: &str, list: &[f64]) -> Result<()> {
    if list.is_empty() {
        return Err(Error::Config(format!("{name} is empty")));
    }
    if list.iter().any(|&m| !(m > 0.0 && m <= 1.0)) {
        return Err(Error::Config(format!("{name} values must lie in (0,1]")));
    }
    if list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(format!("{name} must be strictly decreasing")));
    }
    Ok(())
}

/// Supercell size `n` with `box_side = n a m`, or a config error when it is not an integer.
pub fn supercell_for(box_side: f64, a: f64, m: f64) -> Result<usize> {
    let n = box_side / (a * m);
    let r = n.round();
    if r < 1.0 || (n - r).abs() > 1e-9 * n {
        return Err(Error::Config(format!("box {box_side} is not an integer number of cells of side {a} x m = {m}")));
    }
    Ok(r as usize)
}

/// Dielectric matrix named by a config source. `reference` is supplied by the caller.
pub fn resolve_eps(source: &EpsSource, reference: impl FnOnce() -> Result<DielectricMatrix>) -> Result<DielectricMatrix> {
    match source {
        EpsSource::Scalar(e) => Ok(DielectricMatrix::isotropic(*e)),
        EpsSource::Named(s) if s == "identity" => Ok(DielectricMatrix::identity()),
        EpsSource::Named(s) if s == "reference" => reference(),
        EpsSource::Named(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {path}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad dielectric matrix in {path}: {e}")))
        }
    }
}

/// Crystal ground state shared between experiments.
pub fn shared_crystal(cfg: &CrystalConfig) -> Result<Arc<CrystalGroundState>> {
    Ok(Arc::new(cfg.solve()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_reference() {
        let c = Config::from_toml("").unwrap();
        assert_eq!(c.crystal.mesh, [4; 3]);
        assert_eq!(c.response.eps_supercell, 24);
        assert_eq!(supercell_for(c.macrolimit.box_side, 10.0, c.macrolimit.m_list[2]).unwrap(), 6);
    }

    #[test]
    fn parses_sections() {
        let c = Config::from_toml(
            "seed = 3\n[crystal]\nz = 0\nsites = []\n[pekar]\neps = 2.5\n[macrolimit]\nm_list = [0.5, 0.25]\n",
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.crystal.z, 0);
        assert_eq!(c.pekar.eps, EpsSource::Scalar(2.5));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Config::from_toml("[crystal]\nbogus = 1\n").is_err());
        assert!(Config::from_toml("[macrolimit]\nm_list = [0.25, 0.5]\n").is_err());
        assert!(Config::from_toml("[macrolimit]\nm_list = [0.3]\n").is_err());
        assert!(Config::from_toml("[pekar]\nkernel = \"spherical\"\n").is_err());
    }
}
