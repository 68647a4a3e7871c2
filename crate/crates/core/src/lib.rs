pub mod app;
pub mod diagnostics;
pub mod fields;
pub mod physics;
pub mod solver;
