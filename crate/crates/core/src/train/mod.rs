//! Data, initialization, optimization and the training loop.

pub mod config;
pub mod data;
pub mod model;
pub mod optim;
pub mod run;

pub use config::{parse_schedule, DataSource, TrainConfig};
pub use data::{augment, load_cifar10_bin, load_cifar10_dir, parse_cifar10, synth_dataset, Dataset, SynthMode, CIFAR_MEAN, CIFAR_STD};
pub use model::{ForwardPass, Model, Param, ParamTag};
pub use optim::{lr_for_epoch, sgd_step, SgdConfig, SgdState};
pub use run::{evaluate, load_data, metrics_csv, train, train_model, EpochMetrics, TrainOutcome};
