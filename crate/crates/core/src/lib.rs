//! Activity-cliff modelling toolkit.
//!
//! Builds matched-molecular-pair activity cliffs from compound activity
//! tables, trains an edge-conditioned message-passing regressor with
//! common/uncommon node losses and (sparse) group lasso penalties on the
//! node heads, and scores attribution methods against the cliff-derived
//! ground truth.

pub mod molgraph;
pub mod autodiff;
pub mod model;
pub mod losses;
pub mod pairs;
pub mod attribution;
pub mod evaluation;
pub mod training;
