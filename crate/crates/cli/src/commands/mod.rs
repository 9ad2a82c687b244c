//! One module per subcommand. Each `run` reads its inputs, validates them
//! before any heavy work, and writes every output atomically.

pub mod eval;
pub mod phantom;
pub mod register;
pub mod sweep;
pub mod synth;
