pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod desk;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod fcrn;
pub mod losses;
pub mod oracle;
pub mod pesqnet;
pub mod synth;
pub mod training;
pub mod wav;
