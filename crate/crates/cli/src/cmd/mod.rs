pub mod ablate;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod mtl;
pub mod stages;
pub mod train;
