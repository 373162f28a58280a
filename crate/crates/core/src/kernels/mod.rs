//! Raw numeric kernels shared by the tape operations.

pub mod conv;
