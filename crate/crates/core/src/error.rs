use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("source is not neutral: mean {mean:e}")]
    NonNeutralSource { mean: f64 },
    #[error("plane-wave basis is empty")]
    EmptyBasis,
    #[error("fields live on different domains")]
    DomainMismatch,
    #[error("dilated field loses {tail:e} of its L2 mass above the target cutoff")]
    ResolutionLoss { tail: f64 },
    #[error("no gap between bands Z and Z+1 (gap {gap:e})")]
    NoGap { gap: f64 },
    #[error("{what} did not converge in {iterations} iterations (residual {residual:e})")]
    NoConvergence { what: &'static str, iterations: usize, residual: f64 },
    #[error("cell ground state is degenerate (spectral gap {gap:e})")]
    DegenerateGroundState { gap: f64 },
    #[error("grids are not commensurate: {0}")]
    IncommensurateGrids(String),
    #[error("unoccupied band sum not converged (tail ratio {ratio:e})")]
    InsufficientBands { ratio: f64 },
    #[error("conjugate gradient stalled after {iterations} iterations (residual {residual:e})")]
    CgNoConvergence { iterations: usize, residual: f64 },
    #[error("dielectric fit residual {residual:e} too large")]
    FitFailure { residual: f64 },
    #[error("dielectric matrix is singular on a grid wavevector")]
    SingularEps,
    #[error("perturbed levels straddle the Fermi level: homo {homo}, lumo {lumo}, fermi {fermi}")]
    GapClosure { homo: f64, lumo: f64, fermi: f64 },
    #[error("no binding: the infimum is zero and is not attained")]
    NoBinding,
    #[error("box too small: {shell_mass:e} of the density sits in the outer shell")]
    BoxTooSmall { shell_mass: f64 },
    #[error("supercell dimension {dim} exceeds cap {cap}")]
    InfeasibleSupercell { dim: usize, cap: usize },
    #[error("LAPACK {routine} failed with info {info}")]
    Lapack { routine: &'static str, info: i32 },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for iterative solvers that ran out of iterations.
    pub fn is_nonconvergence(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. } | Error::CgNoConvergence { .. } | Error::FitFailure { .. }
        )
    }
}
