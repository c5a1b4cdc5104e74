//! Experiment orchestration: portable tensor I/O, configuration schemas,
//! comparison sweeps with grid-searched regularization parameters, prior
//! introspection figures, and run manifests.

pub mod artifacts;
pub mod config;
pub mod container;
pub mod introspect;
pub mod manifest;
pub mod plots;
pub mod sweep;
pub mod tensor_file;

pub use artifacts::{
    load_dataset, load_measurement, save_dataset, save_measurement, save_recon_result,
    ReconResultMeta,
};
pub use config::{
    load_toml, ArchChoice, DataFileConfig, IntrospectFileConfig, MaskSpecConfig, ReconFileConfig,
    SampleFileConfig, TrainFileConfig,
};
pub use container::Container;
pub use introspect::{run_introspection, save_grayscale_png};
pub use manifest::{config_hash, make_run_dir, RunManifest};
pub use plots::{line_plot_with_band, loss_curve_plot, BandSeries};
pub use sweep::{
    run_sweep, run_sweep_on, ExperimentSpec, GridPoint, MethodSpec, SummaryRow, SweepReport,
};
pub use tensor_file::{read_tensor, write_tensor, Tensor};
