//! Architecture registry, parameter accounting and MAC estimates.

mod accounting;
mod config;
mod report;

pub use accounting::{
    adapter_extra_macs, backbone_params, base_macs_per_token, count_params, estimate_flops, layer_param_counts,
    FlopReport,
};
pub use config::{builtin_config, builtin_configs, find_config, load_config_overrides, ArchConfig};
pub use report::{compare_methods, MethodRow, MethodTable};
