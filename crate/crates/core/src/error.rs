use std::fmt;

use crate::model::Party;

/// Machine-readable reason attached to protocol failures.
///
/// Codes travel inside error frames on the wire, so their numeric values are
/// part of the protocol and must stay stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum ErrorCode {
    UnknownId = 1,
    SizeMismatch = 2,
    EmptyDirectory = 3,
    Revoked = 4,
    UnexpectedMessage = 5,
    Malformed = 6,
    PositionCollision = 7,
    MissingWitness = 8,
    UnknownSession = 9,
    Internal = 10,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<Self> {
        use ErrorCode::*;
        Some(match v {
            1 => UnknownId,
            2 => SizeMismatch,
            3 => EmptyDirectory,
            4 => Revoked,
            5 => UnexpectedMessage,
            6 => Malformed,
            7 => PositionCollision,
            8 => MissingWitness,
            9 => UnknownSession,
            10 => Internal,
            _ => return None,
        })
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parameter error: {0}")]
    Param(String),
    #[error("{role} protocol error ({code}): {detail}")]
    Protocol {
        role: Party,
        code: ErrorCode,
        detail: String,
    },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub fn protocol(role: Party, code: ErrorCode, detail: impl Into<String>) -> Self {
        Error::Protocol {
            role,
            code,
            detail: detail.into(),
        }
    }

    /// The role that raised a protocol error, if any.
    pub fn role(&self) -> Option<Party> {
        match self {
            Error::Protocol { role, .. } => Some(*role),
            _ => None,
        }
    }

    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            Error::Protocol { code, .. } => Some(*code),
            _ => None,
        }
    }

    pub fn is_revoked(&self) -> bool {
        self.code() == Some(ErrorCode::Revoked)
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
