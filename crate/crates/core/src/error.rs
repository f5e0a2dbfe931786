use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Flux linkage outside the open saturation interval `(-lambda_sat, lambda_sat)`.
    #[error("flux linkage {lambda} outside saturation domain (lambda_sat = {lambda_sat})")]
    SaturationDomain { lambda: f64, lambda_sat: f64 },

    #[error("simulated flux reached saturation at t = {t} s")]
    SaturationReached { t: f64 },

    #[error("integration step size underflow at t = {t} s")]
    StepUnderflow { t: f64 },

    #[error("reference infeasible at t = {t} s (flux radicand {radicand})")]
    InfeasibleReference { t: f64, radicand: f64 },

    #[error("singular inversion: flux {x3} Wb at or below guard")]
    SingularInversion { x3: f64 },

    #[error("reference has zero norm on the evaluation window")]
    ZeroNormReference,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("steady-state current is zero, resistance cannot be estimated")]
    NoResistanceEstimate,

    #[error("optimizer protocol violation: {0}")]
    Protocol(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty sample")]
    EmptySample,

    #[error("sensitivity vector has zero maximum")]
    ZeroSensitivity,

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI error record and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::SaturationDomain { .. } => "saturation_domain",
            Error::SaturationReached { .. } => "saturation_reached",
            Error::StepUnderflow { .. } => "step_underflow",
            Error::InfeasibleReference { .. } => "infeasible_reference",
            Error::SingularInversion { .. } => "singular_inversion",
            Error::ZeroNormReference => "zero_norm_reference",
            Error::Shape(_) => "shape",
            Error::NoResistanceEstimate => "no_resistance_estimate",
            Error::Protocol(_) => "protocol",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::EmptySample => "empty_sample",
            Error::ZeroSensitivity => "zero_sensitivity",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code for the CLI. Zero is reserved for success.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) => 2,
            Error::Io(_) => 3,
            _ => 4,
        }
    }
}
