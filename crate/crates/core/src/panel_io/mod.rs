//! Panel ingestion and design construction.
//!
//! A [`PanelDataset`] holds outcomes and features for `N + 1` units (the
//! treated unit first) over `T0` pre-treatment and `T1` post-treatment
//! periods. [`build_design`] stacks it into the matrices of the constrained
//! least-squares problem and [`build_predictor`] extracts the post-treatment
//! predictor vector.

mod dataset;
mod design;

pub use dataset::{load_panel, CsvFormat, FillPolicy, PanelDataset, PanelSchema};
pub use design::{
    build_design, build_predictor, ControlSpec, DesignDump, DesignOptions, PredictorSpec,
    PredictorVector, Regime, ScDesign,
};
