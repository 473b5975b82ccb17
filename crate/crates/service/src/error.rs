use serde::Serialize;

/// Error reported by the CLI (on stderr) and by the HTTP API (as the body).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ServiceError {
    pub code: String,
    pub message: String,
}

#[derive(Serialize)]
struct Envelope<'a> {
    error: &'a ServiceError,
}

impl ServiceError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        ServiceError {
            code: code.to_string(),
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        ServiceError::new("usage", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        ServiceError::new("not_found", message)
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        ServiceError::new("invalid_request", message)
    }

    /// `{"error": {"code": …, "message": …}}`
    pub fn to_json(&self) -> String {
        serde_json::to_string(&Envelope { error: self }).expect("plain strings serialize")
    }

    /// 2 for usage errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.code == "usage" {
            2
        } else {
            1
        }
    }
}

impl std::fmt::Display for ServiceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ServiceError {}

impl From<splatlens::Error> for ServiceError {
    fn from(e: splatlens::Error) -> Self {
        use splatlens::Error as E;
        let code = match &e {
            E::InvalidParameter { .. } => "invalid_parameter",
            E::Shape(_) => "shape",
            E::EmptyMask => "empty_mask",
            E::DegenerateRoi { .. } => "degenerate_roi",
            E::Checkpoint(_) => "checkpoint",
            E::Format(_) => "format",
            E::NonFiniteLoss { .. } => "non_finite_loss",
            E::Config(_) => "config",
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => "not_found",
            E::Io(_) => "io",
            E::Json(_) => "json",
            E::Image(_) => "image",
        };
        ServiceError::new(code, e.to_string())
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        splatlens::Error::from(e).into()
    }
}

impl From<serde_json::Error> for ServiceError {
    fn from(e: serde_json::Error) -> Self {
        ServiceError::new("json", e.to_string())
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;
