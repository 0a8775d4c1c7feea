//! Residual-adapter speaker adaptation for a toy non-autoregressive acoustic model.

pub mod adapters;
pub mod backbone;
pub mod config;
pub mod evaluation;
pub mod synthdata;
pub mod serving;
pub mod tensorcore;
pub mod training;
