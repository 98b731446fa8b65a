//! HTTP gateway and command line for the fieldcare engine.

pub mod api;
pub mod cli;
