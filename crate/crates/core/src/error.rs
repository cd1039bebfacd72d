use thiserror::Error;

/// Errors produced by the SLAM engine and its harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("robot speed {speed:.4} m/s is below the heading threshold")]
    StationaryRobot { speed: f64 },

    #[error("nodes {0} and {1} coincide; range Jacobian undefined")]
    DegenerateRange(u32, u32),

    #[error("innovation covariance is numerically singular")]
    SingularInnovation,

    #[error("gauge anchors {0} and {1} coincide")]
    AnchorsCoincident(u32, u32),

    #[error("node geometry is degenerate: {0}")]
    DegenerateGeometry(String),

    #[error("beacon {id} has {have} usable ranges, needs {need}")]
    InsufficientRanges { id: u32, have: usize, need: usize },

    #[error("beacon {0} is a gauge anchor")]
    AnchorRemoval(u32),

    #[error("unknown node id {0}")]
    UnknownNode(u32),

    #[error("beacon {0} already present")]
    DuplicateBeacon(u32),

    #[error("point outside the map interior")]
    OutOfMap,

    #[error("normal equations are numerically singular")]
    SingularSystem,

    #[error("empty estimate stream")]
    EmptyStream,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code for the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Scenario(_) => 3,
            _ => 4,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
