use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure a catalog node can report.
///
/// Each variant maps to a stable three digit wire code (see [`Error::code`]);
/// 4xx codes are client errors, 5xx codes are server side failures. The
/// `Display` text is what goes on the wire after the code, so it is kept
/// short and free of volatile detail for the variants that golden files
/// exercise.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("malformed line: {0}")]
    MalformedLine(String),
    #[error("unknown verb")]
    UnknownVerb,
    #[error("bad arguments: {0}")]
    BadArguments(String),
    #[error("redirect {node} {addr}")]
    Redirect { node: String, addr: String },
    #[error("not found")]
    NotFound,
    #[error("parent not found")]
    ParentNotFound,
    #[error("already exists")]
    AlreadyExists,
    #[error("not empty")]
    NotEmpty,
    #[error("bad name")]
    BadName,
    #[error("duplicate attribute")]
    DuplicateAttribute,
    #[error("no such attribute")]
    NoSuchAttribute,
    #[error("arity mismatch")]
    ArityMismatch,
    #[error("type mismatch")]
    TypeMismatch,
    #[error("bad condition: {0}")]
    BadCondition(String),
    #[error("cannot remove root")]
    CannotRemoveRoot,
    #[error("duplicate subscription")]
    DuplicateSubscription,
    #[error("no such subscription")]
    NoSuchSubscription,
    #[error("regressing ack")]
    RegressingAck,
    #[error("subscription expired")]
    SubscriptionExpired,
    #[error("subscription not connected")]
    NotConnected,
    #[error("forwarding loop")]
    ForwardingLoop,
    #[error("overlapping roots {0} {1}")]
    OverlappingRoots(String, String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("conflict")]
    Conflict,
    #[error("owner unreachable")]
    OwnerUnreachable,
    #[error("apply failed: {0}")]
    ApplyFailed(String),
    #[error("snapshot aborted")]
    SnapshotAborted,
    #[error("master unreachable")]
    MasterUnreachable,
    #[error("gap detected: expected {expected}, got {got}")]
    GapDetected { expected: u64, got: u64 },
}

impl Error {
    pub fn code(&self) -> u16 {
        match self {
            Error::MalformedLine(_) => 400,
            Error::UnknownVerb => 401,
            Error::BadArguments(_) => 402,
            Error::Redirect { .. } => 403,
            Error::NotFound => 404,
            Error::ParentNotFound => 414,
            Error::AlreadyExists => 405,
            Error::NotEmpty => 406,
            Error::BadName => 407,
            Error::DuplicateAttribute => 408,
            Error::NoSuchAttribute => 409,
            Error::ArityMismatch => 410,
            Error::TypeMismatch => 411,
            Error::BadCondition(_) => 412,
            Error::CannotRemoveRoot => 413,
            Error::DuplicateSubscription => 420,
            Error::NoSuchSubscription => 421,
            Error::RegressingAck => 422,
            Error::SubscriptionExpired => 423,
            Error::NotConnected => 424,
            Error::ForwardingLoop => 425,
            Error::OverlappingRoots(..) => 426,
            Error::UnknownNode(_) => 427,
            Error::StorageFailure(_) => 500,
            Error::Conflict => 501,
            Error::OwnerUnreachable => 502,
            Error::ApplyFailed(_) => 503,
            Error::SnapshotAborted => 504,
            Error::MasterUnreachable => 505,
            Error::GapDetected { .. } => 506,
        }
    }

    /// Rebuilds an error from an `ERR <code> <message>` status line received
    /// from a peer. Variants that carry data are reconstructed from the
    /// message where that is possible.
    pub fn from_wire(code: u16, message: &str) -> Error {
        let detail = |prefix: &str| {
            message
                .strip_prefix(prefix)
                .map(|s| s.trim_start().to_string())
                .unwrap_or_else(|| message.to_string())
        };
        match code {
            400 => Error::MalformedLine(detail("malformed line:")),
            401 => Error::UnknownVerb,
            402 => Error::BadArguments(detail("bad arguments:")),
            403 => {
                let mut parts = message.split(' ').skip(1);
                let node = parts.next().unwrap_or_default().to_string();
                let addr = parts.next().unwrap_or_default().to_string();
                Error::Redirect { node, addr }
            }
            404 => Error::NotFound,
            405 => Error::AlreadyExists,
            406 => Error::NotEmpty,
            407 => Error::BadName,
            408 => Error::DuplicateAttribute,
            409 => Error::NoSuchAttribute,
            410 => Error::ArityMismatch,
            411 => Error::TypeMismatch,
            412 => Error::BadCondition(detail("bad condition:")),
            413 => Error::CannotRemoveRoot,
            414 => Error::ParentNotFound,
            420 => Error::DuplicateSubscription,
            421 => Error::NoSuchSubscription,
            422 => Error::RegressingAck,
            423 => Error::SubscriptionExpired,
            424 => Error::NotConnected,
            425 => Error::ForwardingLoop,
            426 => {
                let mut parts = detail("overlapping roots").split(' ').map(str::to_string).collect::<Vec<_>>();
                let b = parts.pop().unwrap_or_default();
                let a = parts.pop().unwrap_or_default();
                Error::OverlappingRoots(a, b)
            }
            427 => Error::UnknownNode(detail("unknown node")),
            501 => Error::Conflict,
            502 => Error::OwnerUnreachable,
            503 => Error::ApplyFailed(detail("apply failed:")),
            504 => Error::SnapshotAborted,
            505 => Error::MasterUnreachable,
            _ => Error::StorageFailure(detail("storage failure:")),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::StorageFailure(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_round_trip_for_fixed_messages() {
        let all = [
            Error::UnknownVerb,
            Error::NotFound,
            Error::AlreadyExists,
            Error::NotEmpty,
            Error::BadName,
            Error::CannotRemoveRoot,
            Error::SubscriptionExpired,
            Error::NotConnected,
            Error::Redirect { node: "A".into(), addr: "127.0.0.1:7000".into() },
            Error::OverlappingRoots("/a".into(), "/a/b".into()),
            Error::BadCondition("unknown attribute x".into()),
        ];
        for e in all {
            assert_eq!(Error::from_wire(e.code(), &e.to_string()), e);
        }
    }

    #[test]
    fn codes_are_unique() {
        let mut codes = vec![
            Error::MalformedLine(String::new()).code(),
            Error::UnknownVerb.code(),
            Error::BadArguments(String::new()).code(),
            Error::NotFound.code(),
            Error::AlreadyExists.code(),
            Error::StorageFailure(String::new()).code(),
            Error::Conflict.code(),
            Error::GapDetected { expected: 1, got: 2 }.code(),
        ];
        let n = codes.len();
        codes.sort();
        codes.dedup();
        assert_eq!(codes.len(), n);
    }
}
