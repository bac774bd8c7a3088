pub mod estimate;
pub mod inject;
pub mod plan;

pub use estimate::{
    calibrate_magnitude, estimate_input, input_bounds, inverse_sigmoid, lenet_reconstruct, Calibration, Estimate,
    EstimateReport, FillMode,
};
pub use inject::{inject_conv_inconspicuous, inject_conv_naive, ConvInjectConfig};
pub use plan::{build_conv_plan, region_of, ConvPlan, FilterRole, LayerType, Polarity, RegionRef};
