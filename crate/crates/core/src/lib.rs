pub mod config;
pub mod entry_exit;
pub mod expr;
pub mod models;
pub mod ode;
pub mod orbit;
pub mod simulate;
pub mod system;
