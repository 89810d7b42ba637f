use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid material: {0}")]
    InvalidMaterial(String),
    #[error("stiffness matrix is not symmetric positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("degenerate tetrahedron (signed volume {0:e})")]
    DegenerateTet(f64),
    #[error("singular constant-coefficient symbol at frequency {0:?}")]
    SingularSymbol([usize; 3]),
    #[error("preconditioner is not positive semidefinite (quadratic form {0:e})")]
    IndefinitePreconditioner(f64),
    #[error("loss of positive definiteness in iteration {iteration} (curvature {curvature:e})")]
    Indefinite { iteration: usize, curvature: f64 },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("reference resolution {reference} is not finer than test resolution {test}")]
    CoarseReference { reference: usize, test: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}
