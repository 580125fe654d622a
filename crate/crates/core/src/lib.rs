//! Grid-overlay localization evaluation.
//!
//! Images are centre-cropped into a square canonical frame, overlaid with a
//! labelled grid, and a model is asked for the single cell where a named
//! finding is most prominent. Predictions are scored against pixel masks
//! with a cell-overlap rule and aggregated with bootstrap spreads.

pub mod canvas;
pub mod corpus;
pub mod querier;
pub mod report;
pub mod rng;
pub mod scorer;
pub mod stats;
