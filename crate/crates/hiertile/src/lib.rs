//! Script front end, reference oracle and command implementations for
//! [`hiertile_core`].

pub mod commands;
pub mod matrix_io;
pub mod oracle;
pub mod script;
