//! Toy-scale restoration pipeline: procedural data, networks, training and
//! inference.

pub mod checkpoint;
pub mod dataset;
pub mod nets;
pub mod restore;
pub mod train;

pub use checkpoint::Checkpoint;
pub use dataset::{load_dataset, synth_dataset, write_dataset, ComponentBoxes, ToyFaceSpec, ToySample};
pub use nets::{GenOutput, Generator, GeneratorConfig, QueryEncoder};
pub use restore::{attention_maps, restore, BlockMaps, Restored};
pub use train::{Model, Prepared, StepLog, TrainConfig, Trainer};
