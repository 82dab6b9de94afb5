//! The benchmark problems: the filtered Henon-Heiles system and the 1-d
//! nonlinear Klein-Gordon equation in the nonrelativistic regime.

pub mod henon_heiles;
pub mod klein_gordon;
