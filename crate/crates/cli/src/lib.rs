//! Command line and HTTP front end for splatstyle.

pub mod commands;
pub mod driver;
pub mod server;
