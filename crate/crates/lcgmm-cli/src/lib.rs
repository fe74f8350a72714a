//! File formats, sweep execution and the command-line front end for the
//! registration library.

pub mod cli;
pub mod io;
