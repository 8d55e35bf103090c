use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("class weights must sum to 1, got {sum}")]
    WeightSum { sum: f64 },
    #[error(
        "throughputs must be strictly decreasing (class {index} has {value} after {previous})"
    )]
    Ordering {
        index: usize,
        previous: f64,
        value: f64,
    },
    #[error("impatience rate {impatience} must be below the cell-edge service rate {edge_rate}")]
    Impatience { impatience: f64, edge_rate: f64 },
    #[error("parameter `{name}` must be positive, got {value}")]
    NonPositiveParameter { name: &'static str, value: f64 },
    #[error("parameter `{name}` must be non-negative, got {value}")]
    NegativeParameter { name: &'static str, value: f64 },
    #[error("model has no classes")]
    EmptyModel,
    #[error("load rho = {rho} >= 1: the system without impatience is unstable")]
    Instability { rho: f64 },
    #[error("load rho = {rho} <= 1: the fluid fixed point requires an overloaded cell")]
    NotOverloaded { rho: f64 },
    #[error("state-space count overflows: level {level}, {classes} classes")]
    Overflow { level: usize, classes: usize },
    #[error("state at level {level} lies outside the truncated space (max level {max_level})")]
    OutOfSpace { level: usize, max_level: usize },
    #[error("state has {got} components, model has {expected} classes")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("class index {index} out of range for {classes} classes")]
    UnknownClass { index: usize, classes: usize },
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },
    #[error(
        "truncation bracket gap {gap:e} exceeds tolerance {tolerance:e} at max level {max_level}"
    )]
    GapTooLarge {
        gap: f64,
        tolerance: f64,
        max_level: usize,
    },
    #[error("load grid is empty")]
    EmptyGrid,
    #[error("invalid configuration: {0}")]
    Config(String),
}
