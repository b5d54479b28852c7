//! Parameter and MAC accounting, the width-for-scale solver, dimension
//! sweeps and receptive-field analysis.

mod complexity;
mod rf;

pub use complexity::{
    block_complexity, count_macs, count_params, solve_width_for_scale, sweep_dimension,
    ComplexityReport, Dimension, LayerRow, SWEEP_BASE,
};
pub use rf::{
    enumerate_receptive_fields, positive_block_params, rf_oracle, support_box,
    ReceptiveFieldProfile, SplitField,
};

/// Default search range for [`solve_width_for_scale`].
pub const WIDTH_SEARCH: std::ops::RangeInclusive<usize> = 1..=128;
