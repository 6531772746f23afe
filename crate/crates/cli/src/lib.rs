//! Command-line and HTTP front ends for the vault.

pub mod service;

use pcv_core::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_OTHER: u8 = 1;
pub const EXIT_AUTH: u8 = 2;
pub const EXIT_MALFORMED: u8 = 3;
pub const EXIT_SELF_CHECK: u8 = 4;

/// Process exit code for a core error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::AuthFailure => EXIT_AUTH,
        Error::MalformedContainer(_)
        | Error::LengthMismatch { .. }
        | Error::InvalidParams(_)
        | Error::InvalidKey(_)
        | Error::EmptyPassword
        | Error::DimMismatch { .. }
        | Error::DoesNotFit { .. } => EXIT_MALFORMED,
        Error::SelfCheckExhausted { .. } => EXIT_SELF_CHECK,
        _ => EXIT_OTHER,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(exit_code(&Error::AuthFailure), 2);
        assert_eq!(exit_code(&Error::MalformedContainer("x".into())), 3);
        assert_eq!(exit_code(&Error::SelfCheckExhausted { attempts: 3 }), 4);
        assert_eq!(exit_code(&Error::EntropyUnavailable), 1);
    }
}
