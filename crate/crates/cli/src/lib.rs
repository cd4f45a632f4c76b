//! Library side of the `rsvio` command: dataset runs, manifests and the
//! self-test suite, shared by the binary and the acceptance tests.

pub mod manifest;
pub mod run;
pub mod selftest;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const DIVERGED: i32 = 3;
    pub const SELFTEST: i32 = 4;
}
