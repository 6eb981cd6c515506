//! Grounded situation recognition at desk scale: a coarse-to-fine verb model,
//! a transformer noun model that decodes every semantic role of a verb in
//! parallel, support-set retrieval with triplet-trained re-ranking, and the
//! full five-metric evaluation suite, all built on a minimal f64 reverse-mode
//! autodiff engine.

pub mod cfvm;
pub mod cli;
pub mod config;
pub mod metrics;
pub mod numerics;
pub mod ontology;
pub mod pipeline;
pub mod tnm;
pub mod transformer;
