//! Error type shared by all modules of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MembraneError {
    #[error("grid resolution too low for band limit {lmax}: need nlat >= {need_nlat} and nlon >= {need_nlon}, got {nlat} x {nlon}")]
    ResolutionTooLow {
        lmax: usize,
        need_nlat: usize,
        need_nlon: usize,
        nlat: usize,
        nlon: usize,
    },

    #[error("invalid grid size: nlat and nlon must be positive, got {nlat} x {nlon}")]
    InvalidGridSize { nlat: usize, nlon: usize },

    #[error("grids do not match (operands built on different node sets)")]
    GridMismatch,

    #[error("degenerate embedding at node {node}: det g = {det_g:.3e} (threshold {threshold:.3e})")]
    DegenerateEmbedding {
        node: usize,
        det_g: f64,
        threshold: f64,
    },

    #[error("degenerate embedding during Runge-Kutta sub-stage {stage}: {source}")]
    DegenerateAtStage {
        stage: usize,
        #[source]
        source: Box<MembraneError>,
    },

    #[error("damping coefficient must be positive, got b = {b}")]
    NonpositiveDamping { b: f64 },

    #[error("tangent-vector norm reaches {max_norm:.6} >= pi at node {node}; the exponential map is not injective there")]
    InjectivityRadius { node: usize, max_norm: f64 },

    #[error("field is not tangent along the distorted sphere: |xi . N| = {normal_component:.3e} at node {node} (tolerance {tolerance:.1e})")]
    NotTangent {
        node: usize,
        normal_component: f64,
        tolerance: f64,
    },

    #[error("pointwise gauge map is ill-conditioned at node {node}: condition estimate {condition:.3e}")]
    SingularGaugeMap { node: usize, condition: f64 },

    #[error("forcing does not decay at the required rate: fitted rate {fitted:.4} < beta = {beta:.4}")]
    ForcingNotDecaying { fitted: f64, beta: f64 },

    #[error("eigenvalue iteration did not converge within {iterations} iterations; last Rayleigh quotient {last_quotient:.12e}")]
    NoConvergence {
        iterations: usize,
        last_quotient: f64,
    },

    #[error("sphere fit did not converge within {iterations} iterations; last gradient norm {gradient_norm:.3e}, last radius {radius:.6}")]
    SphereFitNoConvergence {
        iterations: usize,
        gradient_norm: f64,
        radius: f64,
    },

    #[error("need at least {need} samples in the fitting window, found {got}")]
    InsufficientData { need: usize, got: usize },

    #[error("series value {value:.3e} at t = {t:.6} is not positive; cannot fit a decay rate")]
    NonpositiveValue { t: f64, value: f64 },

    #[error("breather radius reached r = {r:.6} <= 0 at t = {t:.6}")]
    BlowDown { r: f64, t: f64 },

    #[error("trajectory needs at least {need} samples for the time stencil, got {got}")]
    InsufficientSamples { need: usize, got: usize },

    #[error("scale exponents violate the iteration constraints: {violations:?}")]
    InvalidExponents { violations: Vec<String> },

    #[error("residual grew for {streak} consecutive iterates (iterate {iterate}, residual {residual:.3e}); iteration diverges")]
    Divergence {
        iterate: usize,
        streak: usize,
        residual: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, MembraneError>;
