//! Command-line surface of the engine: run configuration, the `.dpmw`
//! weight format and one function per subcommand.

pub mod commands;
pub mod config;
pub mod weights;

use dpssm_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_SHAPE: i32 = 5;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Shape(_) => EXIT_SHAPE,
        Error::Format(_) => EXIT_FORMAT,
        Error::Io(_) => EXIT_IO,
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::NonFinite(_) | Error::Diverged(_) => EXIT_CHECK,
    }
}
