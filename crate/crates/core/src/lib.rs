pub mod bridge;
pub mod emulator;
pub mod link;
pub mod nn;
pub mod protocol;
pub mod runtime;
