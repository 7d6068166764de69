use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid spread model: {0}")]
    InvalidModel(String),

    #[error("spread evaluation failed at q = {q}: {reason}")]
    Evaluation { q: f64, reason: String },

    #[error("spread never crosses zero within {doublings} doublings")]
    UnboundedDemand { doublings: u32 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("bid profile has {thetas} entries but the roster has {bidders} bidders")]
    MisalignedProfile { thetas: usize, bidders: usize },

    #[error("bidder roster is empty")]
    EmptyRoster,

    #[error("total bids {sum_theta} exceed the spread surplus {surplus}")]
    BidsExceedSurplus { sum_theta: f64, surplus: f64 },

    #[error("index {index} out of range for {len} bidders")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("maximal liquidity is shared by bidders {0:?}")]
    AmbiguousPivot(Vec<usize>),

    #[error("missing parameter: {0}")]
    MissingParameter(&'static str),

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("regression cannot be converted to a spread model: {0}")]
    NotConvertible(String),

    #[error("input parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Stable machine-readable code, used by the CLI error payload.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidModel(_) => "invalid_model",
            Error::Evaluation { .. } => "evaluation_error",
            Error::UnboundedDemand { .. } => "unbounded_demand",
            Error::InvalidInput(_) => "invalid_input",
            Error::MisalignedProfile { .. } => "misaligned_profile",
            Error::EmptyRoster => "empty_roster",
            Error::BidsExceedSurplus { .. } => "bids_exceed_spread_surplus",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::AmbiguousPivot(_) => "ambiguous_pivot",
            Error::MissingParameter(_) => "missing_parameter",
            Error::InsufficientData(_) => "insufficient_data",
            Error::RankDeficient => "rank_deficient",
            Error::NotConvertible(_) => "not_convertible",
            Error::Parse(_) => "parse_error",
            Error::Io(_) => "io_error",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
