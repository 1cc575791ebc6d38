pub mod adapter;
pub mod analysis;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gate;
pub mod matrix;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod streams;
pub mod verify;
