use thiserror::Error;

use crate::model::ValidationReport;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("national id is empty after normalization")]
    EmptyNationalId,
    #[error("invalid patient reference {0:?}")]
    PatientRef(String),
    #[error("unknown ehr type {0:?}")]
    UnknownEhrType(String),
    #[error("invalid timestamp {value:?}: {reason}")]
    Timestamp { value: String, reason: String },
    #[error("invalid record: {0}")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// HTTP-facing error class shared by every service.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Unauthenticated,
    Forbidden,
    NotFound,
    Conflict,
    Unavailable,
    Internal,
}

impl ErrorClass {
    pub fn status(self) -> u16 {
        match self {
            ErrorClass::Validation => 400,
            ErrorClass::Unauthenticated => 401,
            ErrorClass::Forbidden => 403,
            ErrorClass::NotFound => 404,
            ErrorClass::Conflict => 409,
            ErrorClass::Unavailable => 503,
            ErrorClass::Internal => 500,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            ErrorClass::Validation => "validation",
            ErrorClass::Unauthenticated => "unauthenticated",
            ErrorClass::Forbidden => "forbidden",
            ErrorClass::NotFound => "not_found",
            ErrorClass::Conflict => "conflict",
            ErrorClass::Unavailable => "unavailable",
            ErrorClass::Internal => "internal",
        }
    }

    pub fn from_status(status: u16) -> ErrorClass {
        match status {
            400 => ErrorClass::Validation,
            401 => ErrorClass::Unauthenticated,
            403 => ErrorClass::Forbidden,
            404 => ErrorClass::NotFound,
            409 => ErrorClass::Conflict,
            503 => ErrorClass::Unavailable,
            _ => ErrorClass::Internal,
        }
    }
}

/// Error returned by service operations (locate, transfer, login, audit query).
#[derive(Debug, Clone, Error)]
#[error("{}: {message}", class.code())]
pub struct ServiceError {
    pub class: ErrorClass,
    pub message: String,
    pub detail: String,
}

impl ServiceError {
    pub fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        ServiceError {
            class,
            message: message.into(),
            detail: String::new(),
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Validation, message)
    }

    pub fn unauthenticated(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Unauthenticated, message)
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Forbidden, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::NotFound, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Internal, message)
    }

    pub fn status(&self) -> u16 {
        self.class.status()
    }
}

impl From<ModelError> for ServiceError {
    fn from(e: ModelError) -> Self {
        ServiceError::validation(e.to_string())
    }
}

impl From<crate::audit::AuditError> for ServiceError {
    // fail-closed: a request whose audit record cannot be written is an error
    fn from(e: crate::audit::AuditError) -> Self {
        ServiceError::internal("audit log unavailable").with_detail(e.to_string())
    }
}
